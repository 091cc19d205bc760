//! Seedable, reproducible random numbers.
//!
//! Backed by ChaCha8, a counter-based stream cipher: the stream position is an explicit
//! 128-bit word counter, so the full state is `(seed, word position)` and can be saved in a
//! checkpoint and restored exactly. Output does not depend on platform or thread count.

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Position in the ChaCha8 output stream, in 32-bit words.
    pub word_pos: u128,
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, word_pos: self.inner.get_word_pos() }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::new(state.seed);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    /// Independent child stream, e.g. one per image or per session.
    pub fn fork(&mut self) -> Self {
        Self::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in the closed range `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: i64, hi: i64) -> Result<i64> {
        if lo > hi {
            return Err(contract(format!("uniform_int bounds inverted: {lo} > {hi}")));
        }
        Ok(self.inner.random_range(lo..=hi))
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(contract("index draw from an empty range"));
        }
        Ok(self.inner.random_range(0..n))
    }

    /// Uniform float in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> Result<f64> {
        if !(std >= 0.0) {
            return Err(contract(format!("normal std must be non-negative, got {std}")));
        }
        if std == 0.0 {
            return Ok(mean);
        }
        let z: f64 = StandardNormal.sample(&mut self.inner);
        Ok(mean + std * z)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
