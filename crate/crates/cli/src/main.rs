//! `anchorsum`: reconstruct, score anchors, compress, summarize, evaluate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchorsum_core::config::ExperimentConfig;
use anchorsum_core::pipeline::stages;
use anchorsum_core::scoring::{Aggregation, Indicator};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "anchorsum", version, about = "Anchor-guided compression and summarization of meeting transcripts")]
struct Cli {
    /// TOML file with flat config keys, or `default` for built-in values.
    #[arg(long, global = true, default_value = "default")]
    config: String,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Context window in sentences.
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    anchor_ratio: Option<f64>,
    /// Bucket budget of the compressed input.
    #[arg(long, global = true)]
    buckets: Option<usize>,
    #[arg(long, global = true)]
    indicator: Option<Indicator>,
    #[arg(long, global = true)]
    aggregation: Option<Aggregation>,
    /// Report directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the planted-saliency corpus.
    SynthData,
    /// Clean, split and tokenize transcripts.
    Preprocess,
    /// Train the response reconstructor.
    TrainRecon,
    /// Score tokens and select anchors.
    Score,
    /// Bucket and pool every transcript, or a synthetic length with --n.
    Compress {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        c: Option<usize>,
    },
    /// Train the summarizer on compressed inputs.
    TrainSumm,
    /// Summarize the test split.
    Generate,
    /// ROUGE of generated summaries.
    Evaluate,
    /// Anchor deletion/substitution and truncation baselines.
    Ablate,
    /// Anchor-ratio and indicator sweep.
    Sweep,
    /// Time attention and reconstruction against input length.
    Bench,
    /// Every stage from corpus to ROUGE report.
    Pipeline,
}

fn load_config(spec: &str) -> Result<ExperimentConfig> {
    if spec == "default" {
        return Ok(ExperimentConfig::default());
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&cli.config)?;
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.window {
        cfg.window = v;
    }
    if let Some(v) = cli.anchor_ratio {
        cfg.anchor_ratio = v;
    }
    if let Some(v) = cli.buckets {
        cfg.buckets = v;
    }
    if let Some(v) = cli.indicator {
        cfg.indicator = v;
    }
    if let Some(v) = cli.aggregation {
        cfg.aggregation = v;
    }
    if let Some(v) = &cli.out {
        cfg.report_dir = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    eprintln!("# config {}\n{}", cfg.hash(), toml::to_string(&cfg)?);
    let written = match &cli.command {
        Command::SynthData => stages::synth_data(&cfg)?,
        Command::Preprocess => stages::preprocess(&cfg)?,
        Command::TrainRecon => stages::train_recon(&cfg)?,
        Command::Score => stages::score(&cfg)?,
        Command::Compress { n: Some(n), c } => {
            let (_, msg) = stages::compress_synthetic(*n, c.unwrap_or(cfg.buckets), cfg.anchor_ratio)?;
            println!("{msg}");
            Vec::new()
        }
        Command::Compress { n: None, c } => {
            let cfg = ExperimentConfig {
                buckets: c.unwrap_or(cfg.buckets),
                ..cfg
            };
            stages::compress(&cfg)?
        }
        Command::TrainSumm => stages::train_summ(&cfg)?,
        Command::Generate => stages::generate(&cfg)?,
        Command::Evaluate => stages::evaluate_stage(&cfg)?,
        Command::Ablate => stages::ablate(&cfg)?,
        Command::Sweep => stages::sweep(&cfg)?,
        Command::Bench => stages::bench(&cfg)?,
        Command::Pipeline => stages::run_all(&cfg)?,
    };
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
