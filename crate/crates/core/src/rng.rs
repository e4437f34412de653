//! Seeded random streams. Every stochastic draw in the crate goes through a
//! [`RandomStream`]; there is no global generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{numel, Real, Tensor};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Derive a child seed from `(seed, label)`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(splitmix64(seed) ^ fnv1a(label))
}

#[derive(Clone, Debug)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        RandomStream { seed, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position of the underlying generator in 32-bit words.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Independent stream keyed by `label`; does not advance `self`.
    pub fn substream(&self, label: &str) -> RandomStream {
        RandomStream::new(derive_seed(self.seed, label))
    }

    pub fn indexed(&self, label: &str, index: u64) -> RandomStream {
        RandomStream::new(derive_seed(self.seed, &format!("{label}/{index}")))
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let data = (0..numel(shape)).map(|_| T::of(self.normal())).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RandomStream::new(7);
        let mut b = RandomStream::new(7);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        assert_eq!(a.position(), b.position());
    }

    #[test]
    fn substreams_differ_by_label() {
        let root = RandomStream::new(1);
        let mut x = root.substream("victim/0");
        let mut y = root.substream("victim/1");
        let xs: Vec<f64> = (0..8).map(|_| x.normal()).collect();
        let ys: Vec<f64> = (0..8).map(|_| y.normal()).collect();
        assert_ne!(xs, ys);
        assert_eq!(root.indexed("victim", 3).seed(), root.substream("victim/3").seed());
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut r = RandomStream::new(3);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
