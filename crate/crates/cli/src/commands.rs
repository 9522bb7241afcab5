//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dpdcan::accountant::{self, PrivacyReport};
use dpdcan::io::{self, format_sig9};
use dpdcan::metrics::MetricsReport;
use dpdcan::model::Checkpoint;
use dpdcan::pipeline::{self, EpochRecord, PreprocessedData, SyntheticSpec, TrainObserver};
use dpdcan::{Error, Result};
use serde::Serialize;

use crate::config::{DataSection, InputFormat, RunConfig};
use crate::{AccountArgs, CalibrateArgs, EvaluateArgs, InputArgs, PreprocessArgs, SynthArgs, TrainArgs};

/// Attaches the path to bare I/O errors.
fn at(path: &Path) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let data = pipeline::generate_synthetic(&SyntheticSpec {
        n_cells: a.cells,
        n_genes: a.genes,
        n_clusters: a.clusters,
        separation: a.separation,
        dropout_rate: a.dropout,
        seed: a.seed,
    })?;
    create_dir(&a.out)?;
    let counts = a.out.join("counts.csv");
    io::write_counts(&counts, &data.counts).map_err(at(&counts))?;
    let labels = a.out.join("labels.csv");
    io::write_labels(&labels, "label", data.counts.cell_ids(), &data.labels).map_err(at(&labels))?;
    eprintln!(
        "wrote {} and {} ({} cells, {} genes, {} clusters)",
        counts.display(),
        labels.display(),
        a.cells,
        a.genes,
        a.clusters
    );
    Ok(())
}

fn apply_input(data: &mut DataSection, a: InputArgs) {
    if let Some(p) = a.input {
        data.input = Some(p);
    }
    if let Some(f) = a.format {
        data.format = f;
    }
    if let Some(p) = a.genes {
        data.genes = Some(p);
    }
    if let Some(p) = a.barcodes {
        data.barcodes = Some(p);
    }
    if let Some(n) = a.n_hvg {
        data.n_hvg = n;
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), |p| RunConfig::load(p))
}

/// Reads `data.input` in its configured format and preprocesses raw counts.
fn load_data(data: &DataSection) -> Result<PreprocessedData> {
    let input = data
        .input
        .as_deref()
        .ok_or_else(|| Error::Config("data.input is required".into()))?;
    let raw = match data.format.resolve(input) {
        InputFormat::Bundle => {
            let bundle: PreprocessedData = io::read_json(input)?;
            bundle.validate().map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
            return Ok(bundle);
        }
        InputFormat::Mtx => {
            let need = |p: &Option<PathBuf>, key: &str| {
                p.clone()
                    .ok_or_else(|| Error::Config(format!("data.{key} is required for Matrix-Market input")))
            };
            io::read_matrix_market(input, &need(&data.genes, "genes")?, &need(&data.barcodes, "barcodes")?)?
        }
        InputFormat::Tsv => io::read_counts_delimited(input, b'\t')?,
        InputFormat::Csv | InputFormat::Auto => io::read_counts_delimited(input, b',')?,
    };
    pipeline::preprocess(&raw, data.n_hvg).map_err(|e| match e {
        Error::Domain(m) => Error::Data(format!("{}: {m}", input.display())),
        other => other,
    })
}

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    apply_input(&mut cfg.data, a.input);
    cfg.absolutize_paths()?;
    let data = load_data(&cfg.data)?;
    io::write_json(&a.out, &data).map_err(at(&a.out))?;
    eprintln!(
        "wrote {} ({} cells, {} genes)",
        a.out.display(),
        data.n_cells(),
        data.n_genes()
    );
    Ok(())
}

/// Collects per-epoch log lines and echoes them to stderr.
#[derive(Default)]
struct EpochLog {
    lines: String,
}

impl EpochLog {
    fn line(&mut self, text: String) {
        eprintln!("{text}");
        self.lines.push_str(&text);
        self.lines.push('\n');
    }
}

impl TrainObserver for EpochLog {
    fn on_epoch(&mut self, r: &EpochRecord) {
        let stage = match r.stage {
            pipeline::Stage::Instance => "instance",
            pipeline::Stage::Cluster => "cluster",
        };
        self.line(format!(
            "stage={stage} epoch={} samples={} mean_loss={}",
            r.epoch,
            r.samples,
            format_sig9(r.mean_loss)
        ));
    }
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(p) = &a.labels {
        cfg.data.labels = Some(p.clone());
    }
    if let Some(s) = a.clusters {
        cfg.model.n_clusters = Some(s);
    }
    let p = &mut cfg.privacy;
    if let Some(e) = a.epsilon {
        p.epsilon = Some(e);
        p.sigma = None;
    }
    if let Some(s) = a.sigma {
        p.sigma = Some(s);
        p.epsilon = None;
    }
    if a.non_private {
        p.enabled = false;
        p.epsilon = None;
        p.sigma = None;
    }
    if a.entire_network {
        p.entire_network = true;
    }
    if let Some(d) = a.delta {
        p.delta = d;
    }
    if let Some(c) = a.clip {
        p.clip_bound = c;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.t1 {
        t.t1_epochs = v;
    }
    if let Some(v) = a.t2 {
        t.t2_epochs = v;
    }
    if let Some(v) = a.lot_fraction {
        t.lot_fraction = v;
    }
    if let Some(s) = a.seed {
        cfg.seeds = crate::config::SeedSection {
            base: s,
            ..Default::default()
        };
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    apply_train_flags(&mut cfg, &a);
    apply_input(&mut cfg.data, a.input);
    cfg.absolutize_paths()?;
    let data = load_data(&cfg.data)?;
    let plan = cfg.resolve(data.n_cells(), data.n_genes())?;
    let truth = cfg.data.labels.as_deref().map(io::read_labels).transpose()?;

    create_dir(&a.out)?;
    let manifest = a.out.join("manifest.toml");
    write_text(&manifest, &cfg.to_toml()?)?;

    let mut log = EpochLog::default();
    log.line(format!(
        "cells={} genes={} clusters={} lot_size={} sigma={} private={}",
        data.n_cells(),
        data.n_genes(),
        plan.n_clusters,
        plan.dp.lot_size,
        format_sig9(plan.dp.noise_scale),
        plan.dp.enabled
    ));
    let result = pipeline::train_observed(&data, &plan, &mut log)?;

    let out = |name: &str| a.out.join(name);
    let p = out("encoder.json");
    Checkpoint::from_params(&result.params, true).save(&p).map_err(at(&p))?;
    let p = out("embeddings.csv");
    io::write_embeddings(&p, &data.cell_ids, &result.embeddings).map_err(at(&p))?;
    let p = out("assignments.csv");
    io::write_labels(&p, "cluster", &data.cell_ids, &result.assignments).map_err(at(&p))?;
    let p = out("centers.csv");
    let mut header = vec!["cluster".to_owned()];
    header.extend((0..result.centers.ncols()).map(|j| format!("z{j}")));
    let ids: Vec<String> = (0..result.centers.nrows()).map(|k| k.to_string()).collect();
    io::write_table(&p, &header, &ids, &result.centers).map_err(at(&p))?;
    let p = out("privacy.json");
    io::write_json(&p, &result.privacy).map_err(at(&p))?;

    let r = &result.privacy;
    let mut summary = format!("kmeans_sse={} ", format_sig9(result.log.kmeans_sse));
    let _ = write!(
        summary,
        "status={} steps={}+{} sgm_steps={}",
        serde_json::to_value(r.status)?.as_str().unwrap_or_default(),
        r.steps_stage1,
        r.steps_stage2,
        r.sgm_steps
    );
    if let Some(eps) = r.epsilon {
        let _ = write!(summary, " epsilon={} delta={}", format_sig9(eps), format_sig9(r.delta));
    }
    log.line(summary);

    if let Some(truth) = truth {
        let pred: Vec<(String, String)> = data
            .cell_ids
            .iter()
            .zip(&result.assignments)
            .map(|(c, k)| (c.clone(), k.to_string()))
            .collect();
        let (t, q) = io::align_labels(&truth, &pred)?;
        let metrics = MetricsReport::compute(&t, &q)?.scaled();
        let p = out("metrics.json");
        io::write_json(&p, &metrics).map_err(at(&p))?;
        log.line(format!(
            "nmi={} ari={}",
            format_sig9(metrics.nmi),
            format_sig9(metrics.ari)
        ));
    }
    write_text(&out("run.log"), &log.lines)?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let truth = io::read_labels(&a.labels)?;
    let pred = io::read_labels(&a.pred)?;
    let (t, q) = io::align_labels(&truth, &pred)?;
    let metrics = MetricsReport::compute(&t, &q)?.scaled();
    if let Some(out) = &a.out {
        io::write_json(out, &metrics).map_err(at(out))?;
    }
    print_json(&metrics)
}

#[derive(Serialize)]
struct AccountOutput {
    epsilon: f64,
    delta: f64,
    best_order: Option<u32>,
    sample_rate: f64,
    sigma: f64,
    steps: u64,
}

pub fn account(a: AccountArgs) -> Result<()> {
    let r = PrivacyReport::for_query(a.q, a.sigma, a.steps, a.delta)?;
    print_json(&AccountOutput {
        epsilon: r.epsilon.expect("private query has an epsilon"),
        delta: r.delta,
        best_order: r.best_order,
        sample_rate: r.sample_rate,
        sigma: r.sigma,
        steps: r.sgm_steps,
    })
}

#[derive(Serialize)]
struct CalibrateOutput {
    sigma: f64,
    epsilon: f64,
    target_epsilon: f64,
    delta: f64,
    sample_rate: f64,
    steps: u64,
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let sigma = accountant::calibrate_sigma(a.epsilon, a.delta, a.q, a.steps)?;
    let budget = accountant::epsilon_after(a.q, sigma, a.steps, a.delta)?;
    print_json(&CalibrateOutput {
        sigma,
        epsilon: budget.epsilon,
        target_epsilon: a.epsilon,
        delta: a.delta,
        sample_rate: a.q,
        steps: a.steps,
    })
}
