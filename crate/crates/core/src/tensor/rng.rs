use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

/// Named consumers of randomness. Each one gets its own ChaCha stream so that
/// adding a draw in one place never shifts the values seen by another.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    DataOrder,
    Dropout,
    GateNoise,
    Synth,
    Test,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::DataOrder => 2,
            Stream::Dropout => 3,
            Stream::GateNoise => 4,
            Stream::Synth => 5,
            Stream::Test => 6,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded, splittable generator.
///
/// Identical seed and identical call sequence give an identical value stream,
/// on any platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    key: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, key: 0, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent child stream identified by `(stream, index)`.
    pub fn fork(&self, stream: Stream, index: u64) -> Rng {
        let key = splitmix(self.key ^ splitmix(stream.id().wrapping_mul(0x1000_0000_01B3) ^ index));
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(key);
        Rng { seed: self.seed, key, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform_tensor(&mut self, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = (2.0 * self.uniform() - 1.0) * bound;
        }
        t
    }
}

/// I.i.d. `N(0, std²)` samples.
pub fn gaussian(rng: &mut Rng, shape: impl Into<Vec<usize>>, std: f64) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::Argument(format!("gaussian std must be finite and >= 0, got {std}")));
    }
    let mut t = Tensor::zeros(shape);
    if std > 0.0 {
        for v in t.data_mut() {
            *v = rng.normal() * std;
        }
    }
    Ok(t)
}
