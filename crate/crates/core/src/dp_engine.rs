//! Partially perturbed DP-SGD step.
//!
//! Each per-sample gradient is split into its protected (encoder) and exposed
//! parts, and each part is clipped on its own. Gaussian noise is added to the
//! protected sum only, unless the engine runs in entire-network mode. Both sums
//! are divided by the configured lot size.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accountant::{PrivacyStatus, SgmParams};
use crate::error::{Error, Result};
use crate::model::{Batch, LossSpec, ModelParams, OptimizerState};

/// Clipping, noise and lot settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// When false, gradients are neither clipped nor noised and no privacy is accounted.
    pub enabled: bool,
    pub clip_bound: f64,
    /// Overrides `clip_bound` for the exposed partition.
    pub exposed_clip_bound: Option<f64>,
    pub clip_exposed: bool,
    pub noise_scale: f64,
    pub lot_size: usize,
    /// 1-based encoder layers whose gradients receive noise.
    pub perturb_scope: BTreeSet<usize>,
    /// Also noise the exposed sum (the whole network is perturbed).
    pub entire_network: bool,
}

impl DpConfig {
    /// Noise on every encoder layer of a network with `n_encoder_layers` layers.
    pub fn private(clip_bound: f64, noise_scale: f64, lot_size: usize, n_encoder_layers: usize) -> Self {
        Self {
            enabled: true,
            clip_bound,
            exposed_clip_bound: None,
            clip_exposed: true,
            noise_scale,
            lot_size,
            perturb_scope: (1..=n_encoder_layers).collect(),
            entire_network: false,
        }
    }

    /// Plain minibatch gradients averaged over the configured lot size.
    pub fn non_private(lot_size: usize) -> Self {
        Self {
            enabled: false,
            clip_bound: f64::INFINITY,
            exposed_clip_bound: None,
            clip_exposed: false,
            noise_scale: 0.0,
            lot_size,
            perturb_scope: BTreeSet::new(),
            entire_network: false,
        }
    }

    pub fn exposed_bound(&self) -> f64 {
        self.exposed_clip_bound.unwrap_or(self.clip_bound)
    }

    pub fn validate(&self, n_samples: usize, n_encoder_layers: usize) -> Result<()> {
        if self.lot_size == 0 || self.lot_size > n_samples {
            return Err(Error::config(format!(
                "lot size must lie in [1, {n_samples}], got {}",
                self.lot_size
            )));
        }
        if !self.enabled {
            return Ok(());
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.clip_bound) || !self.exposed_clip_bound.is_none_or(positive) {
            return Err(Error::config("clip bounds must be positive and finite"));
        }
        if !positive(self.noise_scale) {
            return Err(Error::config(format!(
                "noise scale must be positive, got {}",
                self.noise_scale
            )));
        }
        if self.perturb_scope.is_empty() {
            return Err(Error::config("perturbation scope is empty"));
        }
        if let Some(&l) = self.perturb_scope.iter().find(|&&l| l == 0 || l > n_encoder_layers) {
            return Err(Error::config(format!(
                "perturbation scope names layer {l}, encoder layers are 1..={n_encoder_layers}"
            )));
        }
        if self.entire_network && !self.clip_exposed {
            return Err(Error::config("entire-network noise requires exposed clipping"));
        }
        Ok(())
    }

    /// How the released encoder should be labeled.
    pub fn status(&self, n_encoder_layers: usize) -> PrivacyStatus {
        if !self.enabled {
            PrivacyStatus::NonPrivate
        } else if (1..=n_encoder_layers).all(|l| self.perturb_scope.contains(&l)) {
            PrivacyStatus::Private
        } else {
            PrivacyStatus::NonPrivateScope
        }
    }

    /// Sampled Gaussian mechanism compositions charged per step.
    pub fn compositions_per_step(&self) -> u64 {
        match (self.enabled, self.entire_network) {
            (false, _) => 0,
            (true, false) => 1,
            (true, true) => 2,
        }
    }
}

/// Scales `g` in place to norm at most `bound`; returns the norm before clipping.
pub fn clip_in_place(g: &mut [f64], bound: f64) -> Result<f64> {
    if !(bound > 0.0) {
        return Err(Error::domain(format!("clip bound must be positive, got {bound}")));
    }
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::domain("cannot clip a non-finite gradient"));
    }
    let factor = (norm / bound).max(1.0);
    if factor > 1.0 {
        for v in g.iter_mut() {
            *v /= factor;
        }
    }
    Ok(norm)
}

/// `g / max(1, ‖g‖/C)`.
pub fn clip(g: &[f64], bound: f64) -> Result<Vec<f64>> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, bound)?;
    Ok(out)
}

/// Poisson subsampling: each index is kept independently with probability `sample_rate`.
///
/// Returned indices are ascending.
pub fn sample_lot<R: Rng + ?Sized>(n: usize, sample_rate: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::domain(format!("sample rate must lie in (0, 1], got {sample_rate}")));
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < sample_rate).collect())
}

/// Source of the Gaussian perturbation.
pub trait NoiseSource {
    /// Adds i.i.d. `N(0, std²)` draws to every entry of `out`.
    fn add_noise(&mut self, out: &mut [f64], std: f64);
}

/// Gaussian noise from a dedicated seeded stream.
#[derive(Debug, Clone)]
pub struct GaussianNoise {
    rng: ChaCha8Rng,
}

impl GaussianNoise {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }
}

impl NoiseSource for GaussianNoise {
    fn add_noise(&mut self, out: &mut [f64], std: f64) {
        for v in out {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            *v += std * n;
        }
    }
}

/// Draws nothing. Used to isolate the deterministic part of a step.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn add_noise(&mut self, _out: &mut [f64], _std: f64) {}
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub batch_size: usize,
    /// Summed per-sample loss over the lot.
    pub loss: f64,
    pub max_protected_norm: f64,
    pub max_exposed_norm: f64,
    pub max_clipped_protected: f64,
    pub max_clipped_exposed: f64,
}

/// Aggregated, possibly noised, gradient estimate of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyUpdate {
    pub protected_update: Vec<f64>,
    pub exposed_update: Vec<f64>,
    /// The step's privacy cost; `steps` is 2 in entire-network mode.
    pub rdp_increment: Option<SgmParams>,
    pub stats: StepStats,
}

impl NoisyUpdate {
    /// Protected update followed by exposed update, in parameter order.
    pub fn concatenated(&self) -> Vec<f64> {
        let mut out = self.protected_update.clone();
        out.extend_from_slice(&self.exposed_update);
        out
    }
}

/// Computes the clipped, noised and averaged update for `batch` without
/// touching the parameters.
///
/// An empty lot still releases a noised protected update (pure noise) and is
/// charged like any other step.
pub fn noisy_update(
    params: &ModelParams,
    batch: &Batch,
    spec: &LossSpec,
    cfg: &DpConfig,
    dataset_size: usize,
    noise: &mut dyn NoiseSource,
) -> Result<NoisyUpdate> {
    let layout = params.layout();
    let n_encoder = layout.architecture().n_encoder_layers();
    cfg.validate(dataset_size, n_encoder)?;
    let mut stats = StepStats {
        batch_size: batch.len(),
        ..StepStats::default()
    };
    let (mut protected, mut exposed) = if batch.is_empty() {
        (vec![0.0; layout.n_protected()], vec![0.0; layout.n_exposed()])
    } else {
        let exposed_bound = (cfg.enabled && cfg.clip_exposed).then(|| cfg.exposed_bound());
        let protected_bound = cfg.enabled.then_some(cfg.clip_bound);
        let sum = params.clipped_gradient_sum(batch, spec, protected_bound, exposed_bound)?;
        stats.loss = sum.losses.iter().sum();
        stats.max_protected_norm = sum.protected_norms.iter().copied().fold(0.0, f64::max);
        stats.max_exposed_norm = sum.exposed_norms.iter().copied().fold(0.0, f64::max);
        stats.max_clipped_protected = sum.clipped_protected_norms().fold(0.0, f64::max);
        stats.max_clipped_exposed = sum.clipped_exposed_norms().fold(0.0, f64::max);
        if let Some(c) = protected_bound {
            debug_assert!(
                stats.max_clipped_protected <= c + 1e-9,
                "protected norm {} exceeds bound {c}",
                stats.max_clipped_protected
            );
        }
        if let Some(c) = exposed_bound {
            debug_assert!(
                stats.max_clipped_exposed <= c + 1e-9,
                "exposed norm {} exceeds bound {c}",
                stats.max_clipped_exposed
            );
        }
        (sum.protected, sum.exposed)
    };

    let mut rdp_increment = None;
    if cfg.enabled {
        let std = cfg.noise_scale * cfg.clip_bound;
        for range in layout.layer_ranges(|l| cfg.perturb_scope.contains(&l)) {
            noise.add_noise(&mut protected[range], std);
        }
        if cfg.entire_network {
            noise.add_noise(&mut exposed, cfg.noise_scale * cfg.exposed_bound());
        }
        let q = cfg.lot_size as f64 / dataset_size as f64;
        rdp_increment = Some(SgmParams::new(q, cfg.noise_scale, cfg.compositions_per_step())?);
    }

    let scale = 1.0 / cfg.lot_size as f64;
    protected.iter_mut().for_each(|v| *v *= scale);
    exposed.iter_mut().for_each(|v| *v *= scale);
    Ok(NoisyUpdate {
        protected_update: protected,
        exposed_update: exposed,
        rdp_increment,
        stats,
    })
}

/// Applies `update` with `optimizer`. An empty lot without privacy accounting
/// leaves the parameters and optimizer untouched.
pub fn apply_update(
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    update: &NoisyUpdate,
) -> Result<()> {
    if update.stats.batch_size == 0 && update.rdp_increment.is_none() {
        return Ok(());
    }
    let full = update.concatenated();
    if full.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "update",
            sample: 0,
        });
    }
    optimizer.step(params.values_mut(), &full)
}

/// One training step: [`noisy_update`] followed by [`apply_update`].
pub fn dpan_step(
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    batch: &Batch,
    spec: &LossSpec,
    cfg: &DpConfig,
    dataset_size: usize,
    noise: &mut dyn NoiseSource,
) -> Result<NoisyUpdate> {
    let update = noisy_update(params, batch, spec, cfg, dataset_size, noise)?;
    apply_update(params, optimizer, &update)?;
    Ok(update)
}
