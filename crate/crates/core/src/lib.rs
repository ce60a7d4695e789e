//! A desk-scale conditional-diffusion laboratory.
//!
//! The crate trains a small denoiser with attachable zero-initialized control
//! branches on a two-domain synthetic figure dataset, composes classifier-free
//! guidance vectors from the branches at sampling time, and evaluates the
//! results with a distribution-distance and pose/shape metric suite.

pub mod body;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
