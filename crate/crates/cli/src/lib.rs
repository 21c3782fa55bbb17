//! The `docalign` command line: dataset synthesis, pre-alignment, training,
//! self-supervised fine-tuning, alignment, evaluation, annotation transfer
//! and gradient checks.
//!
//! Every output directory receives a `run.json` holding the parsed
//! arguments, the resolved configuration and SHA-256 digests of the inputs.
//! Exit codes: 0 success, 2 usage or invalid input, 3 I/O or parse failure,
//! 4 numerical failure.

pub mod commands;
pub mod error;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use error::{CliError, Result};

/// Environment variable capping worker threads; 0 or unset runs serially.
pub const THREADS_ENV: &str = "DOCALIGN_THREADS";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_NAME: &str = "model.dapm";

#[derive(Debug, Parser, Serialize)]
#[command(name = "docalign", version, about = "Dense alignment of document photos to their clean originals")]
pub struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Generate a synthetic triplet dataset.
    Synth(SynthArgs),
    /// Map a photo onto a reference canvas with a boundary thin plate spline.
    Prealign(PrealignArgs),
    /// Train an aligner on a triplet manifest with ground-truth flows.
    Train(TrainArgs),
    /// Fine-tune a checkpoint on unlabeled pairs by gradient alignment.
    Selfsup(SelfsupArgs),
    /// Predict the flow of one source/target pair.
    Align(AlignArgs),
    /// Score flows against ground truth.
    Eval(EvalArgs),
    /// Carry COCO annotations from a clean page onto its photo.
    Transfer(TransferArgs),
    /// Compare analytic and finite-difference gradients of the network blocks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Master seed; overrides the parameter file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Canvas side; rescales the parameters.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Generator parameters as JSON; defaults to the 1024 px settings.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Directory of clean pages; procedural pages when absent.
    #[arg(long)]
    pub sources: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PrealignArgs {
    #[arg(long)]
    pub photo: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = docalign_core::prealign::DEFAULT_POINTS_PER_EDGE)]
    pub points_per_edge: usize,
    #[arg(long, default_value_t = docalign_core::prealign::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Output canvas as WIDTHxHEIGHT; defaults to the photo size.
    #[arg(long, value_parser = parse_dims)]
    pub size: Option<(usize, usize)>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Triplet manifest written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Training hyperparameters as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model configuration as JSON.
    #[arg(long, conflicts_with_all = ["tiny", "resume"])]
    pub model: Option<PathBuf>,
    /// Use the small model configuration.
    #[arg(long, conflicts_with = "resume")]
    pub tiny: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on random flips and transposes of the samples.
    #[arg(long)]
    pub augment: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SelfsupArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest whose photo and clean entries form the pairs; flows are not read.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Fine-tuning settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pre-aligned photo.
    #[arg(long)]
    pub source: PathBuf,
    /// Clean reference page.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Checkerboard tile size of the overlay.
    #[arg(long, default_value_t = 32)]
    pub tile: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Predicted flow file.
    #[arg(long, requires = "gt", conflicts_with = "data")]
    pub pred: Option<PathBuf>,
    /// Ground-truth flow file.
    #[arg(long, requires = "pred")]
    pub gt: Option<PathBuf>,
    /// Triplet manifest; flows are predicted with `--checkpoint`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, conflicts_with = "zero_flow")]
    pub checkpoint: Option<PathBuf>,
    /// Score the zero flow instead of a model.
    #[arg(long)]
    pub zero_flow: bool,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 5.0])]
    pub thresholds: Vec<f64>,
    /// Directory for the report; printed to stdout either way.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TransferArgs {
    /// COCO annotations on the clean page.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub image_id: u64,
    /// Flow on the clean grid into the (pre-aligned) photo.
    #[arg(long)]
    pub flow: PathBuf,
    /// Pre-alignment transform written by `prealign`.
    #[arg(long)]
    pub tps: Option<PathBuf>,
    /// Photo the annotations land on; its size bounds the boxes.
    #[arg(long)]
    pub photo: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Points inserted per polygon edge.
    #[arg(long, default_value_t = docalign_core::transfer::DEFAULT_DENSIFY)]
    pub densify: usize,
    /// Also write the photo with the transferred annotations drawn in.
    #[arg(long)]
    pub overlay: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Check every registered block.
    #[arg(long, conflicts_with = "block")]
    pub all: bool,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(docalign_net::gradcheck::BLOCKS))]
    pub block: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the JSON report.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s}"))?;
    if w == 0 || h == 0 {
        return Err(format!("empty canvas {s}"));
    }
    Ok((w, h))
}

/// Worker threads from `DOCALIGN_THREADS`.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            v.trim().parse().map_err(|_| CliError::usage(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}")))
        }
        _ => Ok(0),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes `dir/run.json`.
pub fn write_run(dir: &Path, cli: &Cli, resolved: Value, inputs: &[&Path], threads: usize) -> Result<()> {
    let mut digests = serde_json::Map::new();
    for p in inputs {
        digests.insert(p.display().to_string(), Value::String(sha256_file(p)?));
    }
    let run = json!({
        "tool": "docalign",
        "version": env!("CARGO_PKG_VERSION"),
        "invocation": cli,
        "resolved": resolved,
        "inputs_sha256": digests,
        "threads": threads,
    });
    write_json(&dir.join(RUN_FILE), &run)
}

/// Writes a line to stdout; a closed pipe is not an error.
pub fn emit(line: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_USAGE } else { 0 };
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
