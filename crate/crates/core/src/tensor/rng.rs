use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StandardUniform};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// SplitMix64 finaliser; used to fold stream coordinates into one key.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Counter-based random stream (ChaCha8 keyed by a 64-bit seed, selected
/// by a 64-bit stream id). Identical `(seed, stream)` pairs replay the same
/// sequence on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    /// Integers in `lo..=hi`.
    UniformInt { lo: i64, hi: i64 },
    /// Reals in `[0, 1)`.
    UniformReal,
    Normal { mean: f64, std: f64 },
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Stream for one consumer, keyed by purpose, epoch and sample index so
    /// results do not depend on the order consumers are visited in.
    pub fn derive(global_seed: u64, purpose: &str, epoch: u64, index: u64) -> Self {
        let stream = mix(mix(mix(tag_hash(purpose)) ^ epoch) ^ index);
        Self::new(global_seed, stream)
    }

    /// A child stream of this one.
    pub fn fork(&self, purpose: &str, index: u64) -> Self {
        Self::derive(self.seed, purpose, self.stream, index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform real in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.sample(StandardUniform)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        if std == 0.0 {
            return mean;
        }
        Normal::new(mean, std).expect("std checked").sample(&mut self.inner)
    }

    /// Normal draw resampled until it lies within two standard deviations.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let v = self.normal(0.0, std);
            if v.abs() <= 2.0 * std {
                return v;
            }
        }
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// Tensor of independent draws.
    pub fn draw<T: Scalar>(&mut self, dist: Distribution, shape: &[usize]) -> Result<Tensor<T>> {
        let n = super::numel(shape);
        let data: Vec<T> = match dist {
            Distribution::UniformInt { lo, hi } => {
                if lo > hi {
                    return Err(Error::arg(format!("uniform_int with lo {lo} > hi {hi}")));
                }
                (0..n)
                    .map(|_| T::from_i64(self.inner.random_range(lo..=hi)).unwrap())
                    .collect()
            }
            Distribution::UniformReal => (0..n).map(|_| T::lit(self.uniform())).collect(),
            Distribution::Normal { mean, std } => {
                if !(std >= 0.0) {
                    return Err(Error::arg(format!("normal with negative std {std}")));
                }
                (0..n).map(|_| T::lit(self.normal(mean, std))).collect()
            }
        };
        Tensor::new(shape, data)
    }
}
