//! Named-stream deterministic random number generation.
//!
//! Every stochastic operation in the crate draws from a [`StreamRng`]
//! constructed from an explicit `(seed, stream name)` pair. Two runs with the
//! same seed therefore consume bit-identical randomness regardless of thread
//! count or call order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Counter-based generator for one named stream.
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(b"/");
        hasher.update(stream.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        StreamRng {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn uniform01(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal truncated to [lo, hi] by rejection.
    pub fn truncated_normal(&mut self, lo: f64, hi: f64) -> f64 {
        loop {
            let x = self.normal();
            if x >= lo && x <= hi {
                return x;
            }
        }
    }

    /// Fisher-Yates shuffle of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

/// Derive a child seed for a labelled sub-task.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"#");
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_independent() {
        let a: Vec<f64> = StreamRng::new(7, "alpha").normal_vec(8);
        let b: Vec<f64> = StreamRng::new(7, "alpha").normal_vec(8);
        let c: Vec<f64> = StreamRng::new(7, "beta").normal_vec(8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derive_seed_depends_on_label() {
        assert_ne!(derive_seed(1, "x"), derive_seed(1, "y"));
        assert_eq!(derive_seed(1, "x"), derive_seed(1, "x"));
    }

    #[test]
    fn truncated_normal_stays_in_range() {
        let mut rng = StreamRng::new(3, "trunc");
        for _ in 0..1000 {
            let v = rng.truncated_normal(-1.0, 1.0);
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}
