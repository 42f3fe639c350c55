//! Seeded Gaussian source used for weight init and test fixtures.
//!
//! The stream is fixed: ChaCha8 (`rand_chacha`, seeded through
//! `SeedableRng::seed_from_u64`) produces 64-bit words; the top 53 bits of
//! each word become a uniform `f64`, and Box–Muller turns consecutive pairs
//! into two standard normals (cosine branch first). Values are drawn in `f64`
//! and rounded to `f32` once, after scaling.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub struct NormalRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: u32) -> u32 {
        (self.uniform() * n as f64) as u32
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| (self.standard_normal() * std) as f32)
    }

    pub fn token_ids(&mut self, n: usize, vocab: usize) -> Vec<u32> {
        (0..n).map(|_| self.below(vocab as u32)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a = NormalRng::new(42).tensor(&[64], 1.0);
        let b = NormalRng::new(42).tensor(&[64], 1.0);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&NormalRng::new(43).tensor(&[64], 1.0)));
    }

    #[test]
    fn moments_are_roughly_standard() {
        let mut rng = NormalRng::new(5);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }
}
