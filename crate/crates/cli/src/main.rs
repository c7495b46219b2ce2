//! `flowpref`: command-line driver for the training, sampling, preference
//! optimization and evaluation stages.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowpref_core::cfm::Stage;
use flowpref_core::pipeline::{self, parse_config, RunConfig};
use log::{info, LevelFilter};

#[derive(Parser)]
#[command(name = "flowpref", version, about = "Flow-matching generation with preference optimization on synthetic latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override any config key, e.g. `--set steps=64`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    Pretrain,
    Sft,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and held-out mixture datasets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain, or fine-tune on the quality-filtered dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "pretrain")]
        stage: TrainStage,
        /// Training dataset [default: <out>/train.drpd]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Epochs for the chosen stage.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file stem inside the output directory.
        #[arg(long, default_value = "samples")]
        name: String,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Mine preference pairs with a checkpoint and fine-tune it with DPO.
    Dpo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset for ground-truth winners [default: <out>/train.drpd]
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        gap: Option<f64>,
        #[arg(long)]
        dpo_epochs: Option<usize>,
        /// generated | ground-truth
        #[arg(long)]
        winner_source: Option<String>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
    /// Compare generated samples against a reference set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        generated: PathBuf,
        /// Reference samples [default: <out>/heldout.drpd]
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Sweep gap, DPO epochs and winner source; write a score table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset for ground-truth winners [default: <out>/train.drpd]
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        cfg_scale: Option<f64>,
    },
}

fn init_logging() {
    let level = match std::env::var("DRP_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).format_target(false).init();
}

fn resolve(common: &Common, named: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for (key, value) in named {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{item}`"))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    info!("effective config: {}", config_line(&cfg));
    Ok(cfg)
}

fn config_line(cfg: &RunConfig) -> String {
    cfg.to_json().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn or_default(path: &Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| out.join(name))
}

fn text<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve(&common, &[])?;
            let (train, held) = pipeline::gen_data(&cfg, &common.out)?;
            println!("{}\n{}", train.display(), held.display());
        }
        Command::Train { common, stage, data, init, epochs } => {
            let (stage, key) = match stage {
                TrainStage::Pretrain => (Stage::Pretrain, "pretrain_epochs"),
                TrainStage::Sft => (Stage::Sft, "sft_epochs"),
            };
            let cfg = resolve(&common, &[(key, text(&epochs))])?;
            let data = or_default(&data, &common.out, pipeline::TRAIN_DATA);
            let path = pipeline::train_stage(&cfg, stage, &data, init.as_deref(), &common.out)?;
            println!("{}", path.display());
        }
        Command::Sample { common, checkpoint, name, cfg_scale } => {
            let cfg = resolve(&common, &[("cfg_scale", text(&cfg_scale))])?;
            let path = pipeline::sample_stage(&cfg, &checkpoint, &common.out, &name)?;
            println!("{}", path.display());
        }
        Command::Dpo { common, checkpoint, data, beta, gap, dpo_epochs, winner_source, cfg_scale } => {
            let cfg = resolve(
                &common,
                &[
                    ("beta", text(&beta)),
                    ("gap", text(&gap)),
                    ("dpo_epochs", text(&dpo_epochs)),
                    ("winner_source", winner_source),
                    ("cfg_scale", text(&cfg_scale)),
                ],
            )?;
            let data = or_default(&data, &common.out, pipeline::TRAIN_DATA);
            let path = pipeline::dpo_stage(&cfg, &checkpoint, &data, &common.out)?;
            println!("{}", path.display());
        }
        Command::Eval { common, generated, reference } => {
            let cfg = resolve(&common, &[])?;
            let reference = or_default(&reference, &common.out, pipeline::HELDOUT_DATA);
            for r in pipeline::eval_stage(&cfg, &generated, &reference, &common.out)? {
                println!("{}\t{}", r.metric, r.value);
            }
        }
        Command::Ablate { common, checkpoint, data, cfg_scale } => {
            let cfg = resolve(&common, &[("cfg_scale", text(&cfg_scale))])?;
            let data = or_default(&data, &common.out, pipeline::TRAIN_DATA);
            let rows = pipeline::ablate_stage(&cfg, &checkpoint, &data, &common.out)?;
            print!("{}", pipeline::render_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("flowpref: error: {line}");
            ExitCode::FAILURE
        }
    }
}
