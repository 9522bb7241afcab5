//! TOML run configuration and its resolution into a training plan.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dpdcan::dp_engine::DpConfig;
use dpdcan::losses::LossWeights;
use dpdcan::model::{OptimizerConfig, OptimizerKind};
use dpdcan::pipeline::{self, AugmentConfig, KMeansOptions, Seeds, TrainPlan, DEFAULT_HVG};
use dpdcan::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// From the extension: `.json` bundle, `.mtx` Matrix Market, otherwise delimited.
    #[default]
    Auto,
    Csv,
    Tsv,
    Mtx,
    Bundle,
}

impl InputFormat {
    pub fn resolve(self, path: &Path) -> Self {
        if self != InputFormat::Auto {
            return self;
        }
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("json") => InputFormat::Bundle,
            Some("mtx") => InputFormat::Mtx,
            Some("tsv" | "tab" | "txt") => InputFormat::Tsv,
            _ => InputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub input: Option<PathBuf>,
    /// Gene ids of a Matrix-Market input, one per line.
    pub genes: Option<PathBuf>,
    /// Cell barcodes of a Matrix-Market input, one per line.
    pub barcodes: Option<PathBuf>,
    /// Ground-truth `cell_id, label` table; when present, training also writes metrics.
    pub labels: Option<PathBuf>,
    pub format: InputFormat,
    pub n_hvg: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            input: None,
            genes: None,
            barcodes: None,
            labels: None,
            format: InputFormat::Auto,
            n_hvg: DEFAULT_HVG,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub n_clusters: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![256, 64],
            latent: 32,
            n_clusters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub enabled: bool,
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub delta: f64,
    pub clip_bound: f64,
    pub exposed_clip_bound: Option<f64>,
    pub clip_exposed: bool,
    pub entire_network: bool,
    /// 1-based encoder layers that receive noise; all of them when absent.
    pub perturb_scope: Option<Vec<usize>>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: None,
            sigma: None,
            delta: pipeline::DEFAULT_DELTA,
            clip_bound: pipeline::DEFAULT_CLIP_BOUND,
            exposed_clip_bound: None,
            clip_exposed: true,
            entire_network: false,
            perturb_scope: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub t1_epochs: usize,
    pub t2_epochs: usize,
    pub lot_fraction: f64,
    pub rho: f64,
    pub beta: [f64; 3],
    pub stage1_optimizer: OptimizerKind,
    pub stage1_learning_rate: f64,
    pub stage2_optimizer: OptimizerKind,
    pub stage2_learning_rate: f64,
    pub target_refresh_epochs: usize,
    pub mask_prob: f64,
    pub jitter_std: f64,
    pub stop_gradient: bool,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let w = LossWeights::default();
        let (s1, s2) = (OptimizerConfig::adam(), OptimizerConfig::adadelta());
        let aug = AugmentConfig::default();
        let km = KMeansOptions::default();
        Self {
            t1_epochs: pipeline::DEFAULT_EPOCHS,
            t2_epochs: pipeline::DEFAULT_EPOCHS,
            lot_fraction: pipeline::DEFAULT_LOT_FRACTION,
            rho: w.rho,
            beta: w.beta,
            stage1_optimizer: s1.kind,
            stage1_learning_rate: s1.learning_rate,
            stage2_optimizer: s2.kind,
            stage2_learning_rate: s2.learning_rate,
            target_refresh_epochs: 1,
            mask_prob: aug.mask_prob,
            jitter_std: aug.jitter_std,
            stop_gradient: false,
            kmeans_restarts: km.restarts,
            kmeans_max_iter: km.max_iter,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    /// Source of any stream seed not given explicitly.
    pub base: u64,
    pub init: Option<u64>,
    pub data: Option<u64>,
    pub noise: Option<u64>,
    pub augment: Option<u64>,
}

impl SeedSection {
    pub fn seeds(&self) -> Seeds {
        let d = Seeds::from_base(self.base);
        Seeds {
            init: self.init.unwrap_or(d.init),
            data: self.data.unwrap_or(d.data),
            noise: self.noise.unwrap_or(d.noise),
            augment: self.augment.unwrap_or(d.augment),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub privacy: PrivacySection,
    pub train: TrainSection,
    pub seeds: SeedSection,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Parses a config file; relative data paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in cfg.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn paths_mut(&mut self) -> impl Iterator<Item = &mut PathBuf> {
        let d = &mut self.data;
        [&mut d.input, &mut d.genes, &mut d.barcodes, &mut d.labels]
            .into_iter()
            .filter_map(Option::as_mut)
    }

    /// Makes every data path absolute and checks that it exists.
    pub fn absolutize_paths(&mut self) -> Result<()> {
        for p in self.paths_mut() {
            if !p.exists() {
                return Err(Error::Data(format!("{}: file not found", p.display())));
            }
            *p = std::path::absolute(&*p)?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Fills the derived fields, checks the privacy options and builds the
    /// plan for data with `n_cells` cells and `n_genes` genes. Calibrates σ
    /// when a target ε is configured.
    pub fn resolve(&mut self, n_cells: usize, n_genes: usize) -> Result<TrainPlan> {
        let n_clusters = self
            .model
            .n_clusters
            .ok_or_else(|| config_err("model.n_clusters is required"))?;
        let p = &self.privacy;
        if p.enabled && p.epsilon.is_some() == p.sigma.is_some() {
            return Err(config_err("privacy: give exactly one of privacy.epsilon or privacy.sigma"));
        }
        if !p.enabled && (p.epsilon.is_some() || p.sigma.is_some()) {
            return Err(config_err(
                "privacy.epsilon and privacy.sigma must be absent when privacy.enabled = false",
            ));
        }
        if !(self.train.lot_fraction > 0.0 && self.train.lot_fraction <= 1.0) {
            return Err(config_err(format!(
                "train.lot_fraction must lie in (0, 1], got {}",
                self.train.lot_fraction
            )));
        }

        let n_encoder_layers = self.model.hidden.len() + 1;
        let lot = pipeline::lot_size_for(n_cells, self.train.lot_fraction);
        let mut dp = if p.enabled {
            let mut dp = DpConfig::private(p.clip_bound, p.sigma.unwrap_or(1.0), lot, n_encoder_layers);
            if let Some(scope) = &p.perturb_scope {
                dp.perturb_scope = scope.iter().copied().collect::<BTreeSet<_>>();
            }
            dp.exposed_clip_bound = p.exposed_clip_bound;
            dp.clip_exposed = p.clip_exposed;
            dp.entire_network = p.entire_network;
            dp
        } else {
            DpConfig::non_private(lot)
        };
        if p.enabled {
            self.privacy.perturb_scope = Some(dp.perturb_scope.iter().copied().collect());
        }

        let t = &self.train;
        let mut plan = TrainPlan::private(n_cells, n_clusters, 1.0);
        plan.hidden = self.model.hidden.clone();
        plan.latent = self.model.latent;
        plan.t1_epochs = t.t1_epochs;
        plan.t2_epochs = t.t2_epochs;
        plan.weights = LossWeights {
            rho: t.rho,
            beta: t.beta,
        };
        plan.delta = self.privacy.delta;
        plan.stage1_optimizer = OptimizerConfig {
            kind: t.stage1_optimizer,
            learning_rate: t.stage1_learning_rate,
        };
        plan.stage2_optimizer = OptimizerConfig {
            kind: t.stage2_optimizer,
            learning_rate: t.stage2_learning_rate,
        };
        plan.target_refresh_epochs = t.target_refresh_epochs;
        plan.augment = AugmentConfig {
            mask_prob: t.mask_prob,
            jitter_std: t.jitter_std,
        };
        plan.stop_gradient = t.stop_gradient;
        plan.kmeans = KMeansOptions {
            restarts: t.kmeans_restarts,
            max_iter: t.kmeans_max_iter,
            ..KMeansOptions::default()
        };
        plan.seeds = self.seeds.seeds();
        self.seeds = SeedSection {
            base: self.seeds.base,
            init: Some(plan.seeds.init),
            data: Some(plan.seeds.data),
            noise: Some(plan.seeds.noise),
            augment: Some(plan.seeds.augment),
        };

        if let Some(eps) = self.privacy.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(config_err(format!("privacy.epsilon must be positive, got {eps}")));
            }
            // placeholder σ so validation passes; calibration replaces it
            dp.noise_scale = 1.0;
        }
        plan.dp = dp;
        plan.validate(n_cells, n_genes).map_err(|e| match e {
            Error::Domain(m) => Error::Config(m),
            other => other,
        })?;
        if let Some(eps) = self.privacy.epsilon {
            plan.calibrate(n_cells, eps)?;
        }
        Ok(plan)
    }
}
