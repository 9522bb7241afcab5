//! Two-stage clustering training on preprocessed counts.
//!
//! Stage 1 trains the autoencoder on reconstruction plus the instance loss.
//! k-means on the resulting embeddings initializes the cluster centers, and
//! stage 2 refines everything with reconstruction, self-training KL and the
//! cluster-separation loss. Every step goes through the DP engine.

mod augment;
mod kmeans;
mod preprocess;
mod synthetic;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accountant::{self, PrivacyReport, RdpCurve, SgmParams};
use crate::dp_engine::{self, DpConfig, GaussianNoise, NoiseSource, NoisyUpdate};
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{Architecture, Batch, LossSpec, ModelParams, OptimizerConfig, OptimizerState, DEFAULT_HIDDEN, DEFAULT_LATENT};

pub use augment::AugmentConfig;
pub use kmeans::{kmeans, kmeans_with, KMeansOptions, KMeansResult};
pub use preprocess::{preprocess, size_factors, CountMatrix, PreprocessedData, DEFAULT_HVG, MIN_CELLS_PER_GENE};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_LOT_FRACTION: f64 = 0.1;
pub const DEFAULT_CLIP_BOUND: f64 = 0.1;
pub const DEFAULT_DELTA: f64 = 1e-5;

/// Independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Parameter initialization and k-means seeding.
    pub init: u64,
    /// Lot sampling.
    pub data: u64,
    /// Gradient perturbation.
    pub noise: u64,
    pub augment: u64,
}

impl Seeds {
    /// Four distinct streams derived from one number.
    pub fn from_base(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed.wrapping_add(1),
            noise: seed.wrapping_add(2),
            augment: seed.wrapping_add(3),
        }
    }
}

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub n_clusters: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub t1_epochs: usize,
    pub t2_epochs: usize,
    pub weights: LossWeights,
    pub dp: DpConfig,
    pub delta: f64,
    pub stage1_optimizer: OptimizerConfig,
    pub stage2_optimizer: OptimizerConfig,
    /// Stage-2 epochs between recomputations of the target distribution.
    pub target_refresh_epochs: usize,
    pub augment: AugmentConfig,
    pub stop_gradient: bool,
    pub kmeans: KMeansOptions,
    pub seeds: Seeds,
}

/// `round(fraction · n)`, at least 1 and at most `n`.
pub fn lot_size_for(n_samples: usize, fraction: f64) -> usize {
    ((fraction * n_samples as f64).round() as usize).clamp(1, n_samples.max(1))
}

impl TrainPlan {
    /// Defaults for `n_samples` cells: 100 + 100 epochs, lot size 0.1·n, C = 0.1,
    /// δ = 1e-5, noise multiplier `sigma`.
    pub fn private(n_samples: usize, n_clusters: usize, sigma: f64) -> Self {
        let hidden = DEFAULT_HIDDEN.to_vec();
        let lot = lot_size_for(n_samples, DEFAULT_LOT_FRACTION);
        Self {
            n_clusters,
            dp: DpConfig::private(DEFAULT_CLIP_BOUND, sigma, lot, hidden.len() + 1),
            hidden,
            latent: DEFAULT_LATENT,
            t1_epochs: DEFAULT_EPOCHS,
            t2_epochs: DEFAULT_EPOCHS,
            weights: LossWeights::default(),
            delta: DEFAULT_DELTA,
            stage1_optimizer: OptimizerConfig::adam(),
            stage2_optimizer: OptimizerConfig::adadelta(),
            target_refresh_epochs: 1,
            augment: AugmentConfig::default(),
            stop_gradient: false,
            kmeans: KMeansOptions::default(),
            seeds: Seeds::from_base(0),
        }
    }

    /// Same defaults without clipping, noise or accounting.
    pub fn non_private(n_samples: usize, n_clusters: usize) -> Self {
        let mut plan = Self::private(n_samples, n_clusters, 1.0);
        plan.dp = DpConfig::non_private(plan.dp.lot_size);
        plan
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            latent: self.latent,
            n_clusters: self.n_clusters,
        }
    }

    pub fn sample_rate(&self, n_samples: usize) -> f64 {
        self.dp.lot_size as f64 / n_samples as f64
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> usize {
        n_samples.div_ceil(self.dp.lot_size)
    }

    /// Training steps of each stage.
    pub fn stage_steps(&self, n_samples: usize) -> (u64, u64) {
        let per = self.steps_per_epoch(n_samples) as u64;
        (self.t1_epochs as u64 * per, self.t2_epochs as u64 * per)
    }

    /// Sampled Gaussian mechanism compositions the full run will be charged.
    pub fn sgm_steps(&self, n_samples: usize) -> u64 {
        let (a, b) = self.stage_steps(n_samples);
        (a + b) * self.dp.compositions_per_step()
    }

    /// Sets the noise multiplier to the smallest grid value whose accounted
    /// ε after the full run does not exceed `epsilon`.
    pub fn calibrate(&mut self, n_samples: usize, epsilon: f64) -> Result<f64> {
        if !self.dp.enabled {
            return Err(Error::config("cannot calibrate a non-private plan"));
        }
        let steps = self.sgm_steps(n_samples);
        let sigma = accountant::calibrate_sigma(epsilon, self.delta, self.sample_rate(n_samples), steps.max(1))?;
        self.dp.noise_scale = sigma;
        Ok(sigma)
    }

    pub fn validate(&self, n_samples: usize, input_dim: usize) -> Result<()> {
        let arch = self.architecture(input_dim);
        arch.validate()?;
        if self.n_clusters > n_samples {
            return Err(Error::config(format!(
                "{} clusters requested for {n_samples} cells",
                self.n_clusters
            )));
        }
        self.weights.validate()?;
        self.dp.validate(n_samples, arch.n_encoder_layers())?;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        self.stage1_optimizer.validate()?;
        self.stage2_optimizer.validate()?;
        if self.target_refresh_epochs == 0 {
            return Err(Error::config("target refresh interval must be >= 1 epoch"));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Instance,
    Cluster,
}

impl Stage {
    fn label(self) -> &'static str {
        match self {
            Stage::Instance => "instance",
            Stage::Cluster => "cluster",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Global step index across both stages.
    pub step: usize,
    pub batch_size: usize,
    pub loss: f64,
    pub max_clipped_protected: f64,
    pub max_clipped_exposed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    /// Mean per-sample loss over the lots of the epoch.
    pub mean_loss: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub kmeans_sse: f64,
}

/// State visible to an observer right before an update is applied.
pub struct StepContext<'a> {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub params: &'a ModelParams,
    pub batch: &'a Batch,
    pub spec: &'a LossSpec,
    pub dp: &'a DpConfig,
    pub dataset_size: usize,
    pub update: &'a NoisyUpdate,
}

/// Hooks into the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _ctx: &StepContext) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

/// Output of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub embeddings: Array2<f64>,
    pub centers: Array2<f64>,
    pub privacy: PrivacyReport,
    pub log: TrainLog,
    pub params: ModelParams,
}

fn make_batch(
    data: &PreprocessedData,
    indices: Vec<usize>,
    augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
    targets: Option<&Array2<f64>>,
) -> Batch {
    let features = data.features.select(Axis(0), &indices);
    let views = augment.map(|(cfg, rng)| {
        let mut a = Array2::zeros(features.raw_dim());
        let mut b = Array2::zeros(features.raw_dim());
        for (i, x) in features.outer_iter().enumerate() {
            let (v1, v2) = cfg.augment(x, rng);
            a.row_mut(i).assign(&v1);
            b.row_mut(i).assign(&v2);
        }
        (a, b)
    });
    Batch {
        counts: data.raw_selected.select(Axis(0), &indices),
        size_factors: data.size_factors.select(Axis(0), &indices),
        targets: targets.map(|t| t.select(Axis(0), &indices)),
        features,
        views,
        indices,
    }
}

/// Nearest-kernel cluster of every embedding row.
pub fn assign(embeddings: &Array2<f64>, centers: &Array2<f64>) -> Result<Vec<usize>> {
    let q = losses::soft_assign(embeddings.view(), centers.view())?;
    Ok(q
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect())
}

struct Accounting {
    curve: RdpCurve,
    cached: Option<(SgmParams, RdpCurve)>,
}

impl Accounting {
    fn charge(&mut self, params: SgmParams) -> Result<()> {
        let inc = match &self.cached {
            Some((p, c)) if *p == params => c.clone(),
            _ => {
                let c = accountant::accumulate(&RdpCurve::zero_default(), &params)?;
                self.cached = Some((params, c.clone()));
                c
            }
        };
        self.curve = self.curve.compose(&inc)?;
        Ok(())
    }
}

fn divergence(stage: Stage, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Degenerate { .. } => Error::Divergence {
            stage: stage.label(),
            step,
            reason: err.to_string(),
        },
        other => other,
    }
}

/// Runs both training stages with Gaussian noise drawn from `plan.seeds.noise`.
pub fn train(data: &PreprocessedData, plan: &TrainPlan) -> Result<ClusterResult> {
    train_observed(data, plan, &mut ())
}

/// [`train`] reporting to `observer`.
pub fn train_observed(
    data: &PreprocessedData,
    plan: &TrainPlan,
    observer: &mut dyn TrainObserver,
) -> Result<ClusterResult> {
    let mut noise = GaussianNoise::new(ChaCha8Rng::seed_from_u64(plan.seeds.noise));
    train_with(data, plan, &mut noise, observer)
}

/// [`train`] with an explicit noise source and observer.
pub fn train_with(
    data: &PreprocessedData,
    plan: &TrainPlan,
    noise: &mut dyn NoiseSource,
    observer: &mut dyn TrainObserver,
) -> Result<ClusterResult> {
    data.validate()?;
    let n = data.n_cells();
    plan.validate(n, data.n_genes())?;
    let arch = plan.architecture(data.n_genes());
    let mut params = ModelParams::init(&arch, plan.seeds.init)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(plan.seeds.data);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(plan.seeds.augment);
    let q = plan.sample_rate(n);
    let steps_per_epoch = plan.steps_per_epoch(n);
    let mut accounting = Accounting {
        curve: RdpCurve::zero_default(),
        cached: None,
    };
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let mut stage_steps = (0u64, 0u64);

    let mut run_epoch = |stage: Stage,
                         epoch: usize,
                         params: &mut ModelParams,
                         optimizer: &mut OptimizerState,
                         targets: Option<&Array2<f64>>,
                         log: &mut TrainLog|
     -> Result<()> {
        let spec = match stage {
            Stage::Instance => LossSpec {
                stop_gradient: plan.stop_gradient,
                ..LossSpec::instance_stage(&plan.weights)
            },
            Stage::Cluster => LossSpec::cluster_stage(&plan.weights),
        };
        let mut loss_sum = 0.0;
        let mut samples = 0;
        for _ in 0..steps_per_epoch {
            let lot = dp_engine::sample_lot(n, q, &mut data_rng)?;
            let aug = (stage == Stage::Instance).then_some((&plan.augment, &mut aug_rng));
            let batch = make_batch(data, lot, aug, targets);
            let update = dp_engine::noisy_update(params, &batch, &spec, &plan.dp, n, noise)
                .map_err(|e| divergence(stage, step, e))?;
            if !update.stats.loss.is_finite() {
                return Err(Error::Divergence {
                    stage: stage.label(),
                    step,
                    reason: format!("loss is {}", update.stats.loss),
                });
            }
            observer.on_step(&StepContext {
                stage,
                epoch,
                step,
                params,
                batch: &batch,
                spec: &spec,
                dp: &plan.dp,
                dataset_size: n,
                update: &update,
            })?;
            dp_engine::apply_update(params, optimizer, &update).map_err(|e| divergence(stage, step, e))?;
            if let Some(inc) = update.rdp_increment {
                accounting.charge(inc)?;
            }
            match stage {
                Stage::Instance => stage_steps.0 += 1,
                Stage::Cluster => stage_steps.1 += 1,
            }
            loss_sum += update.stats.loss;
            samples += batch.len();
            log.steps.push(StepRecord {
                stage,
                epoch,
                step,
                batch_size: batch.len(),
                loss: update.stats.loss,
                max_clipped_protected: update.stats.max_clipped_protected,
                max_clipped_exposed: update.stats.max_clipped_exposed,
            });
            step += 1;
        }
        let record = EpochRecord {
            stage,
            epoch,
            mean_loss: if samples > 0 { loss_sum / samples as f64 } else { 0.0 },
            samples,
        };
        observer.on_epoch(&record);
        log.epochs.push(record);
        Ok(())
    };

    let mut optimizer = OptimizerState::new(plan.stage1_optimizer, params.layout().n_params())?;
    for epoch in 0..plan.t1_epochs {
        run_epoch(Stage::Instance, epoch, &mut params, &mut optimizer, None, &mut log)?;
    }

    let z = params.encode(data.features.view())?;
    let km = kmeans_with(z.view(), plan.n_clusters, plan.seeds.init, &plan.kmeans)?;
    log.kmeans_sse = km.sse;
    params.set_centers(km.centers.view())?;

    let mut optimizer = OptimizerState::new(plan.stage2_optimizer, params.layout().n_params())?;
    let mut targets = None;
    for epoch in 0..plan.t2_epochs {
        if epoch % plan.target_refresh_epochs == 0 {
            let z = params.encode(data.features.view())?;
            let q = losses::soft_assign(z.view(), params.centers())?;
            targets = Some(losses::target_distribution(q.view())?);
        }
        run_epoch(Stage::Cluster, epoch, &mut params, &mut optimizer, targets.as_ref(), &mut log)?;
    }

    let embeddings = params.encode(data.features.view())?;
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            stage: "final",
            step,
            reason: "non-finite embeddings".into(),
        });
    }
    let centers = params.centers().to_owned();
    let assignments = assign(&embeddings, &centers)?;
    let status = plan.dp.status(arch.n_encoder_layers());
    let privacy = PrivacyReport::from_curve(
        status,
        &accounting.curve,
        plan.delta,
        plan.dp.noise_scale,
        plan.dp.enabled.then_some(plan.dp.clip_bound),
        q,
        stage_steps,
        plan.dp.compositions_per_step(),
    )?;
    Ok(ClusterResult {
        assignments,
        embeddings,
        centers,
        privacy,
        log,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accountant::PrivacyStatus;

    fn toy() -> (PreprocessedData, Vec<usize>) {
        let data = generate_synthetic(&SyntheticSpec {
            n_cells: 60,
            n_genes: 30,
            n_clusters: 3,
            separation: 1.5,
            dropout_rate: 0.05,
            seed: 2,
        })
        .unwrap();
        (preprocess(&data.counts, 2000).unwrap(), data.labels)
    }

    fn small_plan(n: usize, sigma: Option<f64>) -> TrainPlan {
        let mut plan = match sigma {
            Some(s) => TrainPlan::private(n, 3, s),
            None => TrainPlan::non_private(n, 3),
        };
        plan.hidden = vec![16, 8];
        plan.latent = 4;
        plan.t1_epochs = 2;
        plan.t2_epochs = 2;
        plan.kmeans.restarts = 2;
        plan
    }

    #[test]
    fn zero_epochs_is_kmeans_on_initial_embeddings() {
        let (data, _) = toy();
        let mut plan = small_plan(60, Some(1.0));
        plan.t1_epochs = 0;
        plan.t2_epochs = 0;
        let r = train(&data, &plan).unwrap();
        let params = ModelParams::init(&plan.architecture(data.n_genes()), plan.seeds.init).unwrap();
        let z = params.encode(data.features.view()).unwrap();
        let km = kmeans_with(z.view(), 3, plan.seeds.init, &plan.kmeans).unwrap();
        assert_eq!(r.embeddings, z);
        assert_eq!(r.centers, km.centers);
        assert_eq!(r.privacy.sgm_steps, 0);
        assert!(r.privacy.epsilon.unwrap() > 0.0);
        assert!(r.log.steps.is_empty());
    }

    #[test]
    fn step_and_accounting_counts_agree() {
        let (data, _) = toy();
        let plan = small_plan(60, Some(1.5));
        let r = train(&data, &plan).unwrap();
        let per = plan.steps_per_epoch(60) as u64;
        assert_eq!(per, 10);
        assert_eq!(r.privacy.steps_stage1, 2 * per);
        assert_eq!(r.privacy.steps_stage2, 2 * per);
        assert_eq!(r.log.steps.len() as u64, 4 * per);
        let direct = accountant::epsilon_after(plan.sample_rate(60), 1.5, r.privacy.sgm_steps, plan.delta).unwrap();
        assert!((r.privacy.epsilon.unwrap() - direct.epsilon).abs() < 1e-9);
        assert_eq!(r.privacy.status, PrivacyStatus::Private);
        for s in &r.log.steps {
            assert!(s.max_clipped_protected <= plan.dp.clip_bound + 1e-9);
            assert!(s.max_clipped_exposed <= plan.dp.clip_bound + 1e-9);
        }
        assert!(r.assignments.iter().all(|&a| a < 3));
    }

    #[test]
    fn identical_seeds_give_identical_results() {
        let (data, _) = toy();
        let plan = small_plan(60, Some(1.0));
        let a = train(&data, &plan).unwrap();
        let b = train(&data, &plan).unwrap();
        assert_eq!(a, b);
        let mut other = plan.clone();
        other.seeds.noise += 10;
        let c = train(&data, &other).unwrap();
        assert_ne!(a.params.protected(), c.params.protected());
    }

    #[test]
    fn zero_noise_makes_partial_and_entire_modes_coincide() {
        let (data, _) = toy();
        let plan = small_plan(60, Some(1.0));
        let mut entire = plan.clone();
        entire.dp.entire_network = true;
        let a = train_with(&data, &plan, &mut dp_engine::ZeroNoise, &mut ()).unwrap();
        let b = train_with(&data, &entire, &mut dp_engine::ZeroNoise, &mut ()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(b.privacy.sgm_steps, 2 * a.privacy.sgm_steps);
    }

    #[test]
    fn calibration_meets_target() {
        let mut plan = TrainPlan::private(300, 3, 1.0);
        let sigma = plan.calibrate(300, 8.0).unwrap();
        assert_eq!(plan.sgm_steps(300), 2000);
        let eps = accountant::epsilon_after(0.1, sigma, 2000, 1e-5).unwrap().epsilon;
        assert!(eps <= 8.0 && eps > 8.0 - 1e-3, "{eps}");
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let (data, _) = toy();
        let mut plan = small_plan(60, Some(1.0));
        plan.n_clusters = 61;
        assert!(matches!(train(&data, &plan), Err(Error::Config(_))));
        let mut plan = small_plan(60, Some(1.0));
        plan.target_refresh_epochs = 0;
        assert!(train(&data, &plan).is_err());
    }
}
