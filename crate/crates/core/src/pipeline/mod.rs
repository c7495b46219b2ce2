//! Stage orchestration. Each stage reads its inputs from files, writes new
//! files under an output directory, and never touches its inputs.
//!
//! | stage    | reads                         | writes                               |
//! |----------|-------------------------------|--------------------------------------|
//! | gen-data | config                        | `train.drpd`, `heldout.drpd`         |
//! | train    | dataset, optional checkpoint  | `pretrain.drpc` or `sft.drpc`, log   |
//! | sample   | checkpoint                    | `<name>.drpd`, `timing.jsonl`        |
//! | dpo      | checkpoint, dataset           | `pairs.drpp`, `dpo.drpc`, log        |
//! | eval     | two sample files              | `eval.jsonl`                         |
//! | ablate   | checkpoint, dataset           | `ablation.tsv`                       |

mod ablation;
mod checkpoint;
mod config;

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use thiserror::Error;

pub use ablation::{ablate, ablate_stage, render_table, AblationRow, ScoreDistribution};
pub use checkpoint::{Checkpoint, PersistError, CHECKPOINT_VERSION};
pub use config::{parse_config, ConfigError, PromptKind, RunConfig};

use crate::cfm::{train, EpochRecord, Stage, TrainError};
use crate::conditioning::{ConditionError, Prompt, StylePrompt};
use crate::field::{ModelParams, TrainState};
use crate::metrics::{append_report, featurize, frechet_distance, kl_divergence, mode_fraction, rtf, MetricError, MetricRecord};
use crate::preference::{
    dpo_train, filter_dataset, mine_candidates, pairs_from_mined, save_pairs, score_sample, DpoConfig, MinedPrompt,
    PreferenceError, PreferencePair, WinnerSource,
};
use crate::rng::{derive_seed, stream};
use crate::sampler::{sample_many, SampleConfig, SampleError};
use crate::synth::{make_mixture_dataset, random_alignment, DataError, Dataset, LatentSeq};

pub const TRAIN_DATA: &str = "train.drpd";
pub const HELDOUT_DATA: &str = "heldout.drpd";
pub const PAIRS_FILE: &str = "pairs.drpp";
pub const TRAIN_LOG: &str = "train.log";
pub const EVAL_REPORT: &str = "eval.jsonl";
pub const TIMING_REPORT: &str = "timing.jsonl";
pub const ABLATION_TABLE: &str = "ablation.tsv";

/// Prompt families; each draws its lyrics from its own seed range.
const SALT_SAMPLE: u64 = 1;
const SALT_MINING: u64 = 2;
const SALT_EVAL: u64 = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("checkpoint model shape does not match the config ({0})")]
    Shape(String),
    #[error("refusing to overwrite input file {0}")]
    InPlace(String),
    #[error("no preference pairs passed the gap and floor thresholds")]
    NoPairs,
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn create_dir(out: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out).map_err(io_at(out))
}

fn guard_output(target: &Path, inputs: &[&Path]) -> Result<(), PipelineError> {
    let Ok(t) = target.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().map(|i| i == t).unwrap_or(false) {
            return Err(PipelineError::InPlace(input.display().to_string()));
        }
    }
    Ok(())
}

fn append_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<(), PipelineError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_at(path))?;
    for line in lines {
        writeln!(f, "{line}").map_err(io_at(path))?;
    }
    Ok(())
}

fn log_epochs(out: &Path, records: &[EpochRecord]) -> Result<(), PipelineError> {
    append_lines(&out.join(TRAIN_LOG), records.iter().map(EpochRecord::log_line))
}

/// Untrained model, fresh optimizer and EMA, seeded conditioning tables.
pub fn fresh_checkpoint(cfg: &RunConfig) -> Checkpoint {
    let params = ModelParams::init(cfg.field_config(), derive_seed(cfg.seed, stream::INIT, 0));
    Checkpoint {
        config: cfg.clone(),
        stage: Stage::Pretrain,
        state: TrainState::fresh(params, cfg.adam(cfg.lr_pretrain), cfg.ema_decay, cfg.ema_interval),
        conditioner: cfg.conditioner(),
        rng_seed: cfg.seed,
    }
}

/// Loads a checkpoint and checks its model shape against `cfg`.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint, PipelineError> {
    let c = Checkpoint::load(path)?;
    let want = cfg.field_config();
    if c.state.params.config() != &want {
        return Err(PipelineError::Shape(format!("{:?} vs {:?}", c.state.params.config(), want)));
    }
    Ok(c)
}

/// Training set and held-out set from the configured mixture.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(PathBuf, PathBuf), PipelineError> {
    create_dir(out)?;
    let spec = cfg.mixture_spec();
    let train_path = out.join(TRAIN_DATA);
    let held_path = out.join(HELDOUT_DATA);
    make_mixture_dataset(&spec, cfg.n_train, derive_seed(cfg.seed, stream::DATA, 0))?.save(&train_path)?;
    make_mixture_dataset(&spec, cfg.n_heldout, derive_seed(cfg.seed, stream::DATA, 1))?.save(&held_path)?;
    info!("wrote {} training and {} held-out samples", cfg.n_train, cfg.n_heldout);
    Ok((train_path, held_path))
}

/// Pretraining or SFT. SFT first drops training samples scoring below
/// `sft_threshold`. With zero epochs the output is the input checkpoint.
pub fn train_stage(
    cfg: &RunConfig,
    stage: Stage,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
) -> Result<PathBuf, PipelineError> {
    if stage == Stage::Dpo {
        return Err(ConfigError::Invalid { key: "stage".into(), reason: "use the dpo stage".into() }.into());
    }
    create_dir(out)?;
    let target = out.join(format!("{stage}.drpc"));
    let mut inputs = vec![data];
    inputs.extend(init);
    guard_output(&target, &inputs)?;
    let start = match init {
        Some(p) => load_checkpoint(cfg, p)?,
        None => fresh_checkpoint(cfg),
    };
    let tc = cfg.train_config(stage);
    if tc.epochs == 0 {
        start.save(&target)?;
        return Ok(target);
    }
    let mut dataset = Dataset::load(data)?;
    if stage == Stage::Sft {
        let before = dataset.len();
        dataset = filter_dataset(&dataset, &cfg.scorer(), cfg.sft_threshold);
        info!("quality filter kept {} of {} samples at threshold {}", dataset.len(), before, cfg.sft_threshold);
    }
    let (state, records) = train(&tc, &dataset, &start.conditioner, start.state)?;
    log_epochs(out, &records)?;
    let ckpt = Checkpoint { config: cfg.clone(), stage, state, conditioner: start.conditioner, rng_seed: cfg.seed };
    ckpt.save(&target)?;
    Ok(target)
}

/// `n` prompts of the given kind; lyrics are random per prompt.
pub fn make_prompts(cfg: &RunConfig, kind: PromptKind, n: usize, salt: u64) -> Vec<Prompt> {
    let modes = cfg.mode_means.len();
    (0..n)
        .map(|i| {
            let seed = derive_seed(cfg.seed, stream::LYRICS, (salt << 32) | i as u64);
            let lyrics = random_alignment(cfg.seq_len, cfg.token_vocab as u32, cfg.max_lyric_tokens, seed);
            let style = match kind {
                PromptKind::ModeTags => StylePrompt::Text(BTreeSet::from([((i % modes) % cfg.tag_vocab) as u32])),
                PromptKind::Open => StylePrompt::open(),
            };
            Prompt { style, lyrics }
        })
        .collect()
}

fn sampling_field(ckpt: &Checkpoint, use_ema: bool) -> &ModelParams {
    if use_ema {
        &ckpt.state.ema.shadow
    } else {
        &ckpt.state.params
    }
}

/// One sample per prompt; sample `i` uses seed `derive(sample.seed, i)`.
pub fn generate(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    prompts: &[Prompt],
    sample: &SampleConfig,
) -> Result<Vec<LatentSeq>, PipelineError> {
    let bundles = prompts
        .iter()
        .map(|p| ckpt.conditioner.bundle(p, cfg.seq_len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(sample_many(sampling_field(ckpt, sample.use_ema), &bundles, sample, cfg.latent_dim, cfg.frame_rate)?)
}

/// Draws `n_samples` latents and records the real-time factor.
pub fn sample_stage(cfg: &RunConfig, checkpoint: &Path, out: &Path, name: &str) -> Result<PathBuf, PipelineError> {
    create_dir(out)?;
    let target = out.join(format!("{name}.drpd"));
    guard_output(&target, &[checkpoint])?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let prompts = make_prompts(cfg, cfg.sample_prompt, cfg.n_samples, SALT_SAMPLE);
    let started = Instant::now();
    let latents = generate(cfg, &ckpt, &prompts, &cfg.sample_config())?;
    let elapsed = started.elapsed().as_secs_f64();
    let frames = latents.iter().map(LatentSeq::len).sum();
    let factor = rtf(elapsed, frames, cfg.frame_rate)?;
    info!("sampled {} sequences in {:.3}s, rtf {:.5}", latents.len(), elapsed, factor);
    let timing = out.join(TIMING_REPORT);
    append_report(&timing, &[MetricRecord::new("rtf", factor, latents.len())]).map_err(io_at(&timing))?;
    Dataset::from_latents(latents)?.save(&target)?;
    Ok(target)
}

/// Generates and scores `candidates` samples for each of `dpo_prompts` open
/// prompts.
pub fn mine(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Vec<MinedPrompt>, PipelineError> {
    let prompts = make_prompts(cfg, PromptKind::Open, cfg.dpo_prompts, SALT_MINING);
    let sample = SampleConfig { seed: derive_seed(cfg.seed, stream::MINING, 0), ..cfg.sample_config() };
    Ok(mine_candidates(
        sampling_field(ckpt, sample.use_ema),
        &ckpt.conditioner,
        &prompts,
        &cfg.scorer(),
        cfg.candidates,
        &sample,
        cfg.seq_len,
        cfg.latent_dim,
        cfg.frame_rate,
    )?)
}

/// Pairs from mined candidates, then DPO against the incoming checkpoint.
pub fn run_dpo(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    mined: &[MinedPrompt],
    dpo: &DpoConfig,
    ground_truth: Option<&Dataset>,
) -> Result<(Checkpoint, Vec<PreferencePair>, Vec<EpochRecord>), PipelineError> {
    let scorer = cfg.scorer();
    let pairs = pairs_from_mined(mined, dpo, ground_truth.map(|d| (d, &scorer)))?;
    if pairs.is_empty() {
        return Err(PipelineError::NoPairs);
    }
    info!("{} preference pairs from {} prompts", pairs.len(), mined.len());
    let (state, records) = dpo_train(dpo, &pairs, &ckpt.conditioner, ckpt.state.clone())?;
    let out = Checkpoint {
        config: cfg.clone(),
        stage: Stage::Dpo,
        state,
        conditioner: ckpt.conditioner.clone(),
        rng_seed: cfg.seed,
    };
    Ok((out, pairs, records))
}

/// Mines pairs with the current model and runs DPO. Ground-truth winners
/// come from `data`.
pub fn dpo_stage(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<PathBuf, PipelineError> {
    create_dir(out)?;
    let target = out.join("dpo.drpc");
    let pairs_path = out.join(PAIRS_FILE);
    guard_output(&target, &[checkpoint, data])?;
    guard_output(&pairs_path, &[checkpoint, data])?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let ground_truth = match cfg.winner_source {
        WinnerSource::GroundTruth => Some(Dataset::load(data)?),
        WinnerSource::Generated => None,
    };
    let mined = mine(cfg, &ckpt)?;
    let (tuned, pairs, records) = run_dpo(cfg, &ckpt, &mined, &cfg.dpo_config(), ground_truth.as_ref())?;
    save_pairs(&pairs_path, &pairs)?;
    log_epochs(out, &records)?;
    tuned.save(&target)?;
    Ok(target)
}

/// FAD-style Fréchet distance and histogram KL of `generated` against
/// `reference`, plus the mean aesthetic score and the share of samples in
/// the scorer's target mode.
pub fn eval_stage(cfg: &RunConfig, generated: &Path, reference: &Path, out: &Path) -> Result<Vec<MetricRecord>, PipelineError> {
    create_dir(out)?;
    let report = out.join(EVAL_REPORT);
    guard_output(&report, &[generated, reference])?;
    let gen: Vec<LatentSeq> = Dataset::load(generated)?.latents().cloned().collect();
    let reference: Vec<LatentSeq> = Dataset::load(reference)?.latents().cloned().collect();
    let records = evaluate(cfg, &gen, &reference)?;
    append_report(&report, &records).map_err(io_at(&report))?;
    Ok(records)
}

pub fn evaluate(cfg: &RunConfig, gen: &[LatentSeq], reference: &[LatentSeq]) -> Result<Vec<MetricRecord>, PipelineError> {
    let grid = cfg.grid();
    let (fit_g, hist_g) = featurize(gen, &grid)?;
    let (fit_r, hist_r) = featurize(reference, &grid)?;
    let scorer = cfg.scorer();
    let scores = gen.iter().map(|x| score_sample(&scorer, x, None).map(|s| s.value)).collect::<Result<Vec<_>, _>>()?;
    let n = gen.len();
    Ok(vec![
        MetricRecord::new("fad", frechet_distance(&fit_r, &fit_g)?, n),
        MetricRecord::new("kl", kl_divergence(&hist_r, &hist_g)?, n),
        MetricRecord::new("mean_score", scores.iter().sum::<f64>() / n as f64, n),
        MetricRecord::new("target_mode_fraction", mode_fraction(gen, &cfg.mode_means, cfg.scorer_mode)?, n),
    ])
}

/// Every stage in order: data, pretraining, SFT, DPO, sampling before and
/// after DPO, evaluation of both.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricRecord>, PipelineError> {
    let (train_path, held_path) = gen_data(cfg, out)?;
    let pre = train_stage(cfg, Stage::Pretrain, &train_path, None, out)?;
    let sft = train_stage(cfg, Stage::Sft, &train_path, Some(&pre), out)?;
    let dpo = dpo_stage(cfg, &sft, &train_path, out)?;
    let before = sample_stage(cfg, &sft, out, "samples_sft")?;
    let after = sample_stage(cfg, &dpo, out, "samples_dpo")?;
    let mut records = eval_stage(cfg, &before, &held_path, out)?;
    records.extend(eval_stage(cfg, &after, &held_path, out)?);
    Ok(records)
}
