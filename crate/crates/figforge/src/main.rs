use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use figforge_core::fixtures::generate_mini_corpus;
use figforge_core::pipeline::{self, RawConfig, Stage};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "figforge", version, about = "Build subfigure/subcaption datasets from article archives")]
struct Cli {
    /// Log filter, e.g. `info` or `figforge_core=debug`. Falls back to RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage, reusing checkpoints that still match the config.
    Run(StageArgs),
    /// Walk the archive and extract figure/caption pairs.
    Ingest(StageArgs),
    /// Keyword filter (and classifier gate when enabled).
    Filter(StageArgs),
    /// Separate compound figures into panels and write crops.
    Split(StageArgs),
    /// Split captions into labeled subcaptions.
    Parse(StageArgs),
    /// Pair panels with subcaptions.
    Align(StageArgs),
    /// Deduplicate and write dataset.jsonl, manifest.json and stats.json.
    Emit(StageArgs),
    /// Score separation and alignment against ground truth into eval.json.
    Eval(StageArgs),
    /// Write the synthetic mini archive with its ledger and config.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args)]
struct StageArgs {
    /// TOML config file; relative paths inside it resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

/// Each flag overrides the config key of the same name.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    archive_root: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    keyword_file: Option<PathBuf>,
    #[arg(long)]
    taxonomy_file: Option<PathBuf>,
    /// gutter | detector
    #[arg(long)]
    split_mode: Option<String>,
    #[arg(long)]
    conf_threshold: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    /// auto | label | similarity | fallback
    #[arg(long)]
    align_mode: Option<String>,
    /// Inference sidecar base URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    classifier_gate: Option<bool>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    exclusion_hash_file: Option<PathBuf>,
    #[arg(long)]
    ground_truth_file: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_in_flight: Option<usize>,
}

impl From<Overrides> for RawConfig {
    fn from(o: Overrides) -> Self {
        RawConfig {
            archive_root: o.archive_root,
            output_dir: o.output_dir,
            keyword_file: o.keyword_file,
            taxonomy_file: o.taxonomy_file,
            split_mode: o.split_mode,
            conf_threshold: o.conf_threshold,
            nms_iou: o.nms_iou,
            align_mode: o.align_mode,
            inference_endpoint: o.endpoint,
            classifier_gate: o.classifier_gate,
            top_k: o.top_k,
            seed: o.seed,
            exclusion_hash_file: o.exclusion_hash_file,
            ground_truth_file: o.ground_truth_file,
            workers: o.workers,
            max_in_flight: o.max_in_flight,
            gutter: None,
            loss: None,
        }
    }
}

fn load(args: StageArgs) -> Result<pipeline::PipelineConfig> {
    pipeline::validate_config(&args.config, args.overrides.into())
        .with_context(|| format!("loading {}", args.config.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let filter = match &cli.log {
        Some(f) => EnvFilter::try_new(f)?,
        None => EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
    };
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();

    let (stage, args) = match cli.command {
        Command::GenFixtures { out, seed } => {
            let ledger =
                generate_mini_corpus(&out, seed).with_context(|| format!("writing fixtures to {}", out.display()))?;
            return print_json(&ledger);
        }
        Command::Run(args) => {
            let cfg = load(args)?;
            let report = pipeline::run_pipeline(&cfg)?;
            return print_json(&report);
        }
        Command::Ingest(a) => (Stage::Ingest, a),
        Command::Filter(a) => (Stage::Filter, a),
        Command::Split(a) => (Stage::Split, a),
        Command::Parse(a) => (Stage::Parse, a),
        Command::Align(a) => (Stage::Align, a),
        Command::Emit(a) => (Stage::Emit, a),
        Command::Eval(a) => (Stage::Eval, a),
    };
    let cfg = load(args)?;
    let summary = pipeline::run_stage(&cfg, stage)?;
    print_json(&summary)
}
