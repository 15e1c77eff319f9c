//! Keyed random streams.
//!
//! Every random draw in the toolkit comes from a stream identified by
//! `(seed, purpose, index)`. The seed and index form the ChaCha key and the
//! purpose selects the ChaCha stream id, so two streams never overlap and a
//! draw does not depend on how many other draws happened before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for. The discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    /// Initial ensemble draws.
    Init = 1,
    /// Dropout masks, indexed by step.
    Mask = 2,
    /// Observation noise at data-generation time.
    DataNoise = 3,
    /// Ground-truth parameter draws.
    Truth = 4,
    /// Artificial noise of the localized scheme, indexed by step.
    LocalizationNoise = 5,
    /// Randomized problem setup (e.g. the transport speed).
    Problem = 6,
    /// Free-form draws used by tests and trial generators.
    Trial = 7,
}

/// A deterministic random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, purpose: Purpose, index: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&index.to_le_bytes());
        key[16..24].copy_from_slice(b"deki-rng");
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(purpose as u64);
        RngStream { inner }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
