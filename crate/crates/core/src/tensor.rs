//! Minimal dense f64 tensor with a named-tensor table used for parameters
//! and checkpoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims {:?} need {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major index for a 2-d tensor.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.dims[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Ordered parameter table; iteration order is deterministic.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Sum of squared entries across a whole table.
pub fn map_sq_norm(map: &TensorMap) -> f64 {
    map.values()
        .map(|t| t.data.iter().map(|v| v * v).sum::<f64>())
        .sum()
}

/// a += scale * b, elementwise over matching keys. Panics on key/shape drift,
/// which would indicate a bug in network construction.
pub fn map_axpy(a: &mut TensorMap, scale: f64, b: &TensorMap) {
    for (name, tb) in b {
        let ta = a.get_mut(name).expect("tensor map key mismatch");
        assert_eq!(ta.dims, tb.dims, "tensor dims mismatch for {name}");
        for (x, y) in ta.data.iter_mut().zip(&tb.data) {
            *x += scale * y;
        }
    }
}

pub fn map_scale(a: &mut TensorMap, scale: f64) {
    for t in a.values_mut() {
        for x in &mut t.data {
            *x *= scale;
        }
    }
}

/// Zeroed table with the same keys and shapes as `like`.
pub fn map_zeros_like(like: &TensorMap) -> TensorMap {
    like.iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(&t.dims)))
        .collect()
}

/// SHA-256 over the canonical byte serialization of a table.
pub fn map_digest(map: &TensorMap) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, t) in map {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for d in &t.dims {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in &t.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}
