use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Binary per-feature keep mask selecting one policy instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub rate: f64,
    /// Seed the mask was drawn from.
    pub seed: u64,
}

impl DropoutMask {
    /// Keeps every feature.
    pub fn full(width: usize) -> Self {
        DropoutMask {
            keep: vec![true; width],
            rate: 0.0,
            seed: 0,
        }
    }

    /// Mask drawn from its own seed.
    pub fn from_seed(width: usize, rate: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Rate(rate));
        }
        let mut r = Rng::seed_from_u64(seed);
        let keep = (0..width).map(|_| r.random::<f64>() >= rate).collect();
        Ok(DropoutMask { keep, rate, seed })
    }

    pub fn width(&self) -> usize {
        self.keep.len()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|k| **k).count()
    }

    /// Zero the dropped entries of `x`.
    pub fn apply(&self, x: &mut [f64]) {
        for (v, k) in x.iter_mut().zip(&self.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}

/// I.i.d. Bernoulli(1 − rate) keep mask over `width` features.
pub fn sample_mask(width: usize, rate: f64, rng: &mut Rng) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Rate(rate));
    }
    DropoutMask::from_seed(width, rate, rng.random())
}
