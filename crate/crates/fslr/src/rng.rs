//! Seeded randomness with purpose-derived streams.
//!
//! Every training run owns one root `Rng`; independent streams (parameter
//! init, batch shuffling, probe draws, ...) are derived by name so that
//! consuming randomness in one stream never perturbs another. Identical
//! seed and call sequence always reproduce identical outputs.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

/// FNV-1a over raw bytes; stable stream ids from purpose strings.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut inner = ChaCha12Rng::seed_from_u64(seed);
        inner.set_stream(0);
        Rng {
            seed,
            stream: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent stream for `(purpose, index)`, sharing this rng's seed.
    pub fn derive(&self, purpose: &str, index: u64) -> Rng {
        let mut bytes = Vec::with_capacity(purpose.len() + 8);
        bytes.extend_from_slice(purpose.as_bytes());
        bytes.extend_from_slice(&index.to_le_bytes());
        let stream = fnv1a(&bytes) | 1; // never collide with the root stream 0
        let mut inner = ChaCha12Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng {
            seed: self.seed,
            stream,
            inner,
        }
    }

    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Tensor of IID standard normals.
    pub fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.inner.sample(StandardNormal);
        }
        t
    }

    pub fn gen_range(&mut self, upper: usize) -> usize {
        self.inner.gen_range(0..upper)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let ta = a.standard_normal(&[2, 2]);
        let tb = b.standard_normal(&[2, 2]);
        assert_eq!(ta, tb);
    }

    #[test]
    fn derived_streams_are_independent() {
        let root = Rng::new(7);
        let mut s1 = root.derive("probe", 0);
        let mut s2 = root.derive("probe", 1);
        let mut s3 = root.derive("data", 0);
        let a = s1.next_u64();
        assert_ne!(a, s2.next_u64());
        assert_ne!(a, s3.next_u64());
        // re-deriving reproduces the stream from the start
        let mut s1b = root.derive("probe", 0);
        assert_eq!(a, s1b.next_u64());
    }

    #[test]
    fn normal_moments_within_clt_bounds() {
        let mut rng = Rng::new(123);
        let n = 1_000_000usize;
        let t = rng.standard_normal(&[100, 100, 100]);
        let mean = t.sum_all() / n as f64;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        // 4-sigma CLT bound on the mean, chi-square concentration on the variance
        assert!(mean.abs() < 0.004, "sample mean {mean} outside (-0.004, 0.004)");
        assert!((0.994..1.006).contains(&var), "sample variance {var} outside (0.994, 1.006)");
    }
}
