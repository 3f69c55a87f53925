//! `moec`: the extraction pipeline as a command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 configuration, 4 I/O, 5 file format,
//! 6 validation, 7 numeric, 8 dimension, 9 degenerate statistics, 10 routing.

mod commands;
mod layers;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moec::extraction::Criterion;
use moec::io::{MetricName, RunConfig};
use moec::{Error, ErrorCategory};

#[derive(Parser, Debug)]
#[command(name = "moec", version, about = "Convert a trained vision transformer into a mixture of experts")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Minimum cluster size as a fraction of captured tokens.
    #[arg(long, global = true, value_name = "F")]
    min_cluster_frac: Option<f64>,
    /// Share of a cluster's total variance the kept neurons must cover.
    #[arg(long, global = true, value_name = "F")]
    extract_pct: Option<f64>,
    #[arg(long, global = true, value_parser = ["variance", "magnitude", "random"])]
    criterion: Option<String>,
    #[arg(long, global = true, value_parser = ["cosine", "euclidean"])]
    metric: Option<String>,
    /// Layers to capture and convert: `2-3`, `0..4` (exclusive) or `1,3`.
    #[arg(long, global = true, value_name = "RANGE")]
    layers: Option<String>,
    /// Directory for artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "moec-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the dense model on the configured dataset.
    Train,
    /// Record MLP inputs and activations of the dense model.
    Capture {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Cluster captured activations and extract experts.
    Extract {
        #[arg(long)]
        capture: Option<PathBuf>,
    },
    /// Build the mixture-of-experts model from the dense model and experts.
    Assemble {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        experts: Option<PathBuf>,
    },
    /// Evaluate a model file on the test split and record its routing.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Distillation fine-tuning of the converted model.
    Finetune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Routing statistics, similarity matrices and expert counts.
    Analyze {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the four ablation presets.
    Ablate {
        /// Run only these presets (comma separated).
        #[arg(long)]
        presets: Option<String>,
    },
    /// Sample-size stability experiment.
    Stability,
    /// Write image patches routed to one expert.
    ExportPatches {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        expert: usize,
        #[arg(long, default_value_t = 32)]
        max: usize,
    },
    /// Summarize dense, converted and fine-tuned models.
    Report,
}

pub fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 3,
        ErrorCategory::Io => 4,
        ErrorCategory::Format => 5,
        ErrorCategory::Validation => 6,
        ErrorCategory::Numeric => 7,
        ErrorCategory::Dimension => 8,
        ErrorCategory::Statistics => 9,
        ErrorCategory::Routing => 10,
    }
}

const USAGE_EXIT: u8 = 2;

fn resolve_config(args: &GlobalArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(f) = args.min_cluster_frac {
        cfg.clustering.min_cluster_size_fraction = f;
        cfg.clustering.min_cluster_size = None;
    }
    if let Some(p) = args.extract_pct {
        cfg.extraction.extraction_percentage = p;
    }
    if let Some(c) = &args.criterion {
        cfg.extraction.criterion = c.parse::<Criterion>()?;
    }
    if let Some(m) = &args.metric {
        cfg.routing.metric = match m.as_str() {
            "euclidean" => MetricName::Euclidean,
            _ => MetricName::Cosine,
        };
    }
    if let Some(r) = &args.layers {
        cfg.capture.layers = Some(layers::parse(r)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_EXIT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = moec::threads::init_from_env()
        .and_then(|_| resolve_config(&cli.global))
        .and_then(|cfg| commands::run(&cli.command, &cfg, &cli.global.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.category()))
        }
    }
}
