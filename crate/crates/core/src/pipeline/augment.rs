//! Stochastic views for the instance loss.

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Masking then additive jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mask_prob: f64,
    pub jitter_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.2,
            jitter_std: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::config(format!("mask probability must lie in [0, 1], got {}", self.mask_prob)));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::config(format!("jitter std must be nonnegative, got {}", self.jitter_std)));
        }
        Ok(())
    }

    /// One view: each coordinate is zeroed with probability `mask_prob`, then
    /// `N(0, jitter_std²)` is added to every coordinate.
    pub fn view<R: Rng + ?Sized>(&self, x: ArrayView1<f64>, rng: &mut R) -> Array1<f64> {
        x.mapv(|v| {
            let kept = if self.mask_prob > 0.0 && rng.random::<f64>() < self.mask_prob {
                0.0
            } else {
                v
            };
            if self.jitter_std > 0.0 {
                let n: f64 = StandardNormal.sample(rng);
                kept + self.jitter_std * n
            } else {
                kept
            }
        })
    }

    /// Two independent views of `x`.
    pub fn augment<R: Rng + ?Sized>(&self, x: ArrayView1<f64>, rng: &mut R) -> (Array1<f64>, Array1<f64>) {
        let a = self.view(x, rng);
        let b = self.view(x, rng);
        (a, b)
    }
}
