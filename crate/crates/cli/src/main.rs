mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpdcan::Error;

use crate::config::InputFormat;

#[derive(Debug, Parser)]
#[command(name = "dpdcan", version, about = "Differentially private deep contrastive clustering of single-cell counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a labeled synthetic count matrix (counts.csv, labels.csv).
    Synth(SynthArgs),
    /// Select genes, compute size factors and features; writes a JSON bundle.
    Preprocess(PreprocessArgs),
    /// Train, cluster and write the encoder, embeddings, assignments and privacy report.
    Train(TrainArgs),
    /// Score predicted clusters against ground-truth labels (NMI and ARI, ×100).
    Evaluate(EvaluateArgs),
    /// ε of a sampled Gaussian mechanism run.
    Account(AccountArgs),
    /// Smallest noise multiplier that meets a target ε.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 300)]
    cells: usize,
    #[arg(long, default_value_t = 200)]
    genes: usize,
    #[arg(long, default_value_t = 3)]
    clusters: usize,
    /// Standard deviation of the per-gene log-mean shift of each cluster.
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// Probability of a technical zero.
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Count matrix (CSV/TSV, Matrix Market, or a preprocessed JSON bundle).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<InputFormat>,
    /// Gene ids for a Matrix-Market input.
    #[arg(long)]
    genes: Option<PathBuf>,
    /// Cell barcodes for a Matrix-Market input.
    #[arg(long)]
    barcodes: Option<PathBuf>,
    /// Number of highly variable genes to keep.
    #[arg(long)]
    n_hvg: Option<usize>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// TOML run configuration; only its [data] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    input: InputArgs,
    /// Output bundle (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    input: InputArgs,
    /// Ground-truth labels; adds metrics.json to the outputs.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Target ε; the noise multiplier is calibrated to meet it.
    #[arg(long, conflicts_with = "sigma")]
    epsilon: Option<f64>,
    /// Noise multiplier.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Per-sample clipping bound.
    #[arg(long)]
    clip: Option<f64>,
    /// Train without clipping, noise or accounting.
    #[arg(long, conflicts_with_all = ["epsilon", "sigma", "entire_network"])]
    non_private: bool,
    /// Noise the whole network instead of the encoder only.
    #[arg(long)]
    entire_network: bool,
    /// Instance-stage epochs.
    #[arg(long)]
    t1: Option<usize>,
    /// Cluster-stage epochs.
    #[arg(long)]
    t2: Option<usize>,
    /// Expected lot size as a fraction of the cells.
    #[arg(long)]
    lot_fraction: Option<f64>,
    /// Base seed for all random streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ground-truth `cell_id, label` table.
    #[arg(long)]
    labels: PathBuf,
    /// Predicted `cell_id, cluster` table.
    #[arg(long)]
    pred: PathBuf,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AccountArgs {
    /// Poisson sampling rate.
    #[arg(long)]
    q: f64,
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    epsilon: f64,
    /// Poisson sampling rate.
    #[arg(long)]
    q: f64,
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) => 1,
        Error::Data(_) | Error::ShapeMismatch { .. } | Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::Degenerate { .. } | Error::EmptyCluster { .. } => 3,
        Error::Calibration(_) => 4,
    }
}

fn init_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("DPDCAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("DPDCAN_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("DPDCAN_THREADS: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Account(a) => commands::account(a),
        Command::Calibrate(a) => commands::calibrate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
