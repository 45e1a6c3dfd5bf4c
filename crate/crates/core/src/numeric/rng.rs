use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{contract, Result};

/// Seeded, platform-independent random source.
///
/// Backed by ChaCha8, whose state transitions are pure integer arithmetic.
/// Independent sub-streams are derived with [`Rng::fork`].
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a generator on a separate ChaCha stream keyed by `stream`.
    /// The parent is not advanced.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { inner, seed: self.seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen()
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// `rows × cols` matrix of i.i.d. N(0, sigma²) entries.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, sigma: f64) -> Result<Tensor> {
    contract!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive and finite, got {sigma}");
    let values = (0..rows * cols).map(|_| sigma * rng.normal()).collect();
    Tensor::matrix(rows, cols, values)
}

pub fn uniform_tensor(rng: &mut Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = super::tensor::numel(&shape);
    let values = (0..n).map(|_| rng.uniform_in(lo, hi)).collect();
    Tensor::new(shape, values).expect("finite uniform draws")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_reproduces_matrix() {
        let a = gaussian_matrix(&mut Rng::new(7), 4, 5, 1.0).unwrap();
        let b = gaussian_matrix(&mut Rng::new(7), 4, 5, 1.0).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn vanishing_sigma_gives_vanishing_entries() {
        let a = gaussian_matrix(&mut Rng::new(1), 8, 8, 1e-300).unwrap();
        assert!(a.max_abs() < 1e-290);
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        assert!(gaussian_matrix(&mut Rng::new(1), 2, 2, 0.0).is_err());
        assert!(gaussian_matrix(&mut Rng::new(1), 2, 2, -1.0).is_err());
    }

    #[test]
    fn large_sample_moments() {
        let a = gaussian_matrix(&mut Rng::new(2024), 512, 512, 1.0).unwrap();
        // Moments computed straight from the drawn sample.
        let n = a.len() as f64;
        let mean = a.values().iter().sum::<f64>() / n;
        let var = a.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.01, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() <= 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn first_ten_thousand_draws_are_reproducible() {
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        let xs: Vec<u8> = (0..10_000).flat_map(|_| a.next_u64().to_le_bytes()).collect();
        let ys: Vec<u8> = (0..10_000).flat_map(|_| b.next_u64().to_le_bytes()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn forks_are_independent_of_parent_position() {
        let mut parent = Rng::new(5);
        let f1 = parent.fork(3).next_u64();
        parent.next_u64();
        let f2 = parent.fork(3).next_u64();
        assert_eq!(f1, f2);
        assert_ne!(parent.fork(4).next_u64(), f1);
    }
}
