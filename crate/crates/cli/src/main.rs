//! `wildattr` command-line runner.
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 usage error, 3 invalid
//! input or config, 4 truncated feature file, 5 checksum mismatch, 6 training
//! failure, 7 constraint infeasible (the baseline model is still written).

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wildattr::linear_probe::ProbeError;
use wildattr::metrics::MetricsError;
use wildattr::synth_bench::{BenchError, SweepAxis};
use wildattr::{StoreError, TrainError};

use crate::config::{ConfigError, FinetuneMode};

#[derive(Debug, Parser)]
#[command(name = "wildattr", version, about = "Target-generator attribution with wild data")]
struct Cli {
    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Master seed; every component seed is derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file whose keys override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneFlags {
    /// Loss budget as a multiple of the baseline loss.
    #[arg(long, default_value_t = 2.0)]
    pub alpha_mult: f64,
    /// First Lagrange multiplier tried.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_init: f64,
    /// Pseudo-labeling confidence threshold.
    #[arg(long, default_value_t = 0.9)]
    pub confidence: f64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate an AFV1 file + manifest, or convert a CSV with a JSONL metadata sidecar.
    Ingest {
        #[arg(long, conflicts_with_all = ["csv", "metadata"])]
        manifest: Option<PathBuf>,
        /// Feature file; defaults to the one named in the manifest.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Headerless CSV, one feature vector per line.
        #[arg(long, requires = "metadata")]
        csv: Option<PathBuf>,
        /// JSONL with one `{"source","role","label"}` object per CSV line.
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the baseline probe on labeled data.
    Train {
        #[arg(long)]
        labeled: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a baseline model with wild data.
    Finetune {
        #[arg(long, value_enum)]
        mode: FinetuneMode,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        wild: PathBuf,
        #[command(flatten)]
        tune: FinetuneFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Per-source AP/AUROC of a model on a test set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        target_source: String,
        /// Comma-separated sources averaged into the hard score.
        #[arg(long, value_delimiter = ',')]
        hard_sources: Option<Vec<String>>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic scenario (labeled, wild and test sets).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize, train all three modes, evaluate and write the report.
    Run {
        #[command(flatten)]
        tune: FinetuneFlags,
        #[arg(long, value_delimiter = ',')]
        hard_sources: Option<Vec<String>>,
        #[command(flatten)]
        common: Common,
    },
    /// Baseline vs. constrained over one scenario axis and several seeds.
    Sweep {
        #[arg(long, value_parser = parse_axis)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Number of seeds, counting up from --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        tune: FinetuneFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Assemble the comparison grid from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown axis {s:?}; expected wild-size, leak-fraction, labeled-size or alpha-multiplier"))
}

pub mod exit {
    pub const IO: u8 = 1;
    pub const VALIDATION: u8 = 3;
    pub const TRUNCATED: u8 = 4;
    pub const CHECKSUM: u8 = 5;
    pub const TRAINING: u8 = 6;
    pub const INFEASIBLE: u8 = 7;
}

/// Returned after the outputs of an infeasible constrained run are written.
#[derive(Debug)]
pub struct Infeasible(pub String);

impl std::fmt::Display for Infeasible {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Infeasible {}

fn store_code(e: &StoreError) -> u8 {
    match e {
        StoreError::Io { .. } => exit::IO,
        StoreError::Truncated { .. } => exit::TRUNCATED,
        StoreError::ChecksumMismatch { .. } => exit::CHECKSUM,
        _ => exit::VALIDATION,
    }
}

fn probe_code(e: &ProbeError) -> u8 {
    match e {
        ProbeError::Io { .. } => exit::IO,
        ProbeError::NonFinite { .. } => exit::TRAINING,
        _ => exit::VALIDATION,
    }
}

fn train_code(e: &TrainError) -> u8 {
    match e {
        TrainError::Store(s) => store_code(s),
        TrainError::Probe(p) => probe_code(p),
        TrainError::BadBaselineLoss(_) => exit::TRAINING,
        _ => exit::VALIDATION,
    }
}

fn metrics_code(e: &MetricsError) -> u8 {
    match e {
        MetricsError::Probe(p) => probe_code(p),
        _ => exit::VALIDATION,
    }
}

/// Maps an error to its exit code and, for store errors, the stable code string.
fn classify(err: &anyhow::Error) -> (u8, Option<&'static str>) {
    for cause in err.chain() {
        if cause.is::<Infeasible>() {
            return (exit::INFEASIBLE, None);
        }
        if cause.is::<ConfigError>() || cause.is::<serde_json::Error>() || cause.is::<csv::Error>() {
            return (exit::VALIDATION, None);
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return (store_code(e), Some(e.code()));
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            let tag = match e {
                TrainError::Store(s) => Some(s.code()),
                _ => None,
            };
            return (train_code(e), tag);
        }
        if let Some(e) = cause.downcast_ref::<ProbeError>() {
            return (probe_code(e), None);
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return (metrics_code(e), None);
        }
        if let Some(e) = cause.downcast_ref::<BenchError>() {
            return match e {
                BenchError::Train(t) => (train_code(t), None),
                BenchError::Metrics(m) => (metrics_code(m), None),
                BenchError::Store(s) => (store_code(s), Some(s.code())),
                BenchError::InvalidSpec(_) | BenchError::InvalidSweep(_) => (exit::VALIDATION, None),
            };
        }
    }
    (exit::IO, None)
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest { manifest, features, csv, metadata, common } => {
            commands::ingest(manifest, features, csv, metadata, common)
        }
        Command::Train { labeled, common } => commands::train(labeled, common),
        Command::Finetune { mode, model, labeled, wild, tune, common } => {
            commands::finetune(mode, model, labeled, wild, tune, common)
        }
        Command::Eval { model, test, target_source, hard_sources, common } => {
            commands::eval(model, test, target_source, hard_sources, common)
        }
        Command::Synth { common } => commands::synth(common),
        Command::Run { tune, hard_sources, common } => commands::run(tune, hard_sources, common),
        Command::Sweep { axis, values, seeds, tune, common } => commands::sweep(axis, values, seeds, tune, common),
        Command::Report { run, out } => commands::report(run, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::new().parse_filters(level).format_timestamp(None).init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, tag) = classify(&err);
            match tag {
                Some(tag) => eprintln!("error[{tag}]: {err:#}"),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::from(code)
        }
    }
}
