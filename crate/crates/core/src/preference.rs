//! Preference optimization: aesthetic scoring, win-lose pair mining, quality
//! filtering and diffusion DPO adapted to flow matching.
//!
//! The DPO loss compares the policy field against a frozen reference on the
//! winner and the loser of a pair, using the flow-matching regression error in
//! place of the noise-estimation error:
//!
//! ```text
//! e(φ, x) = mean ‖v_φ(t, y_t(x), c) − u_t(x)‖²
//! loss    = −ln σ(−β · [(e(θ, xʷ) − e(ref, xʷ)) − (e(θ, xˡ) − e(ref, xˡ))])
//! ```
//!
//! One `(t, y⁻)` draw is shared by all four error terms of a pair, so the loss
//! is exactly `ln 2` when the policy equals the reference.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::{info, warn};
use ndarray::{Array2, ArrayView2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{Reader, Writer};
use crate::cfm::{mean_sq_diff, sample_path_point, EpochRecord, Stage, TrainError};
use crate::conditioning::{ConditionBundle, ConditionError, Conditioner, Prompt, StylePrompt};
use crate::field::{
    accumulate_backward, adamw_step, forward_traced, loss_and_grad, AdamWConfig, FieldError, ModelParams, Objective,
    TrainState, VelocityField,
};
use crate::rng::{derive_seed, rng_for, stream};
use crate::sampler::{sample_many, SampleConfig, SampleError};
use crate::synth::{DataError, Dataset, LatentSeq, LyricAlignment};

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("score {0} outside [1, 10]")]
    ScoreRange(f64),
    #[error("scoring failed: {0}")]
    Scoring(String),
    #[error("need at least two candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("pair store format error: {0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    /// Native 1–5 scale.
    SongLike,
    /// Native 1–10 scale, rescaled before use.
    InstrumentalLike,
}

/// A score on the common 1–5 scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AestheticScore {
    pub value: f64,
    pub source: ScoreSource,
}

/// Affine map of the 1–10 scale onto 1–5.
pub fn map_score_10_to_5(s: f64) -> Result<f64, PreferenceError> {
    if !(1.0..=10.0).contains(&s) {
        return Err(PreferenceError::ScoreRange(s));
    }
    Ok(1.0 + (s - 1.0) * 4.0 / 9.0)
}

/// An automated aesthetic judge. Returns a raw score on its native scale.
pub trait Scorer: Sync {
    fn raw_score(&self, x: &LatentSeq, prompt: Option<&Prompt>) -> Result<(f64, ScoreSource), PreferenceError>;
}

pub fn score_sample<S: Scorer + ?Sized>(
    scorer: &S,
    x: &LatentSeq,
    prompt: Option<&Prompt>,
) -> Result<AestheticScore, PreferenceError> {
    let (raw, source) = scorer.raw_score(x, prompt)?;
    let value = match source {
        ScoreSource::SongLike => raw,
        ScoreSource::InstrumentalLike => map_score_10_to_5(raw)?,
    };
    if !(1.0..=5.0).contains(&value) {
        return Err(PreferenceError::Scoring(format!("normalized score {value} outside [1, 5]")));
    }
    Ok(AestheticScore { value, source })
}

/// Scores a sequence by how close its mean frame is to `target`:
/// `1 + 4·exp(−d² / 2σ²)` on the 1–5 scale (`1 + 9·exp(…)` for the 1–10 scale).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeAffinityScorer {
    pub target: Vec<f64>,
    pub scale: f64,
    pub source: ScoreSource,
}

impl Scorer for ModeAffinityScorer {
    fn raw_score(&self, x: &LatentSeq, _: Option<&Prompt>) -> Result<(f64, ScoreSource), PreferenceError> {
        if x.dim() != self.target.len() {
            return Err(PreferenceError::Scoring(format!(
                "latent width {} vs target width {}",
                x.dim(),
                self.target.len()
            )));
        }
        let d2: f64 = x.mean_frame().iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum();
        let affinity = (-d2 / (2.0 * self.scale * self.scale)).exp();
        let span = match self.source {
            ScoreSource::SongLike => 4.0,
            ScoreSource::InstrumentalLike => 9.0,
        };
        Ok((1.0 + span * affinity, self.source))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantScorer {
    pub value: f64,
    pub source: ScoreSource,
}

impl Scorer for ConstantScorer {
    fn raw_score(&self, _: &LatentSeq, _: Option<&Prompt>) -> Result<(f64, ScoreSource), PreferenceError> {
        Ok((self.value, self.source))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub winner: LatentSeq,
    pub loser: LatentSeq,
    pub score_w: AestheticScore,
    pub score_l: AestheticScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WinnerSource {
    Generated,
    GroundTruth,
}

/// What the DPO error regresses onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpoTarget {
    /// The straight-path velocity `x − y⁻`.
    Velocity,
    /// The noise draw `y⁻` itself.
    Noise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub gap: f64,
    pub winner_floor: f64,
    pub epochs: usize,
    pub adam: AdamWConfig,
    pub batch_size: usize,
    /// Generated candidates per prompt when mining pairs.
    pub candidates: usize,
    pub winner_source: WinnerSource,
    pub target: DpoTarget,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 2000.0,
            gap: 0.4,
            winner_floor: 3.0,
            epochs: 8,
            adam: AdamWConfig { lr: 1e-6, ..Default::default() },
            batch_size: 8,
            candidates: 8,
            winner_source: WinnerSource::Generated,
            target: DpoTarget::Velocity,
            seed: 0,
        }
    }
}

/// Index of the highest and the lowest score; ties go to the lowest index.
pub fn extremes(scores: &[f64]) -> Option<(usize, usize)> {
    let first = *scores.first()?;
    let (mut best, mut worst) = ((0, first), (0, first));
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best.1 {
            best = (i, s);
        }
        if s < worst.1 {
            worst = (i, s);
        }
    }
    Some((best.0, worst.0))
}

/// The gap and floor filter: strict on both.
pub fn passes_thresholds(winner: f64, loser: f64, gap: f64, floor: f64) -> bool {
    winner - loser > gap && winner > floor
}

/// Best and worst candidates of one prompt, kept only if they clear the
/// score gap and the winner floor.
pub fn build_pairs(
    batch: &[(LatentSeq, AestheticScore)],
    prompt: &Prompt,
    cfg: &DpoConfig,
) -> Result<Option<PreferencePair>, PreferenceError> {
    if batch.len() < 2 {
        return Err(PreferenceError::TooFewCandidates(batch.len()));
    }
    let scores: Vec<f64> = batch.iter().map(|(_, s)| s.value).collect();
    let (w, l) = extremes(&scores).expect("non-empty");
    if !passes_thresholds(scores[w], scores[l], cfg.gap, cfg.winner_floor) {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        prompt: prompt.clone(),
        winner: batch[w].0.clone(),
        loser: batch[l].0.clone(),
        score_w: batch[w].1,
        score_l: batch[l].1,
    }))
}

/// Like [`build_pairs`] but the winner is the best ground-truth sample and the
/// loser the worst generated one.
pub fn build_pair_with_ground_truth(
    ground_truth: &[(LatentSeq, AestheticScore)],
    generated: &[(LatentSeq, AestheticScore)],
    prompt: &Prompt,
    cfg: &DpoConfig,
) -> Result<Option<PreferencePair>, PreferenceError> {
    if ground_truth.is_empty() || generated.is_empty() {
        return Err(PreferenceError::TooFewCandidates(ground_truth.len().min(generated.len())));
    }
    let gt: Vec<f64> = ground_truth.iter().map(|(_, s)| s.value).collect();
    let gen: Vec<f64> = generated.iter().map(|(_, s)| s.value).collect();
    let (w, _) = extremes(&gt).expect("non-empty");
    let (_, l) = extremes(&gen).expect("non-empty");
    if !passes_thresholds(gt[w], gen[l], cfg.gap, cfg.winner_floor) {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        prompt: prompt.clone(),
        winner: ground_truth[w].0.clone(),
        loser: generated[l].0.clone(),
        score_w: ground_truth[w].1,
        score_l: generated[l].1,
    }))
}

/// Keeps the samples scoring at least `threshold`, in order. Samples the
/// scorer fails on are dropped with a warning.
pub fn filter_dataset<S: Scorer + ?Sized>(dataset: &Dataset, scorer: &S, threshold: f64) -> Dataset {
    let samples = dataset
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| match score_sample(scorer, &s.latent, None) {
            Ok(score) => score.value >= threshold,
            Err(e) => {
                warn!("sample {i} skipped: {e}");
                false
            }
        })
        .map(|(_, s)| s.clone())
        .collect();
    Dataset { samples, ..dataset.clone() }
}

/// Scores candidates, skipping (and logging) the ones the scorer rejects.
pub fn score_candidates<S: Scorer + ?Sized>(
    scorer: &S,
    latents: Vec<LatentSeq>,
    prompt: Option<&Prompt>,
) -> Vec<(LatentSeq, AestheticScore)> {
    latents
        .into_iter()
        .enumerate()
        .filter_map(|(i, x)| match score_sample(scorer, &x, prompt) {
            Ok(s) => Some((x, s)),
            Err(e) => {
                warn!("candidate {i} skipped: {e}");
                None
            }
        })
        .collect()
}

/// Scored candidates generated for one prompt.
#[derive(Debug, Clone)]
pub struct MinedPrompt {
    pub prompt: Prompt,
    pub candidates: Vec<(LatentSeq, AestheticScore)>,
}

/// Generates and scores `per_prompt` candidates for every prompt. Prompt `j`
/// samples with seed `derive(sample.seed, j)`.
#[allow(clippy::too_many_arguments)]
pub fn mine_candidates<F, S>(
    field: &F,
    conditioner: &Conditioner,
    prompts: &[Prompt],
    scorer: &S,
    per_prompt: usize,
    sample: &SampleConfig,
    len: usize,
    latent_dim: usize,
    frame_rate: f64,
) -> Result<Vec<MinedPrompt>, PreferenceError>
where
    F: VelocityField + Sync + ?Sized,
    S: Scorer + ?Sized,
{
    prompts
        .iter()
        .enumerate()
        .map(|(j, prompt)| {
            let bundle = conditioner.bundle(prompt, len)?;
            let bundles = vec![bundle; per_prompt];
            let cfg = SampleConfig { seed: derive_seed(sample.seed, stream::MINING, j as u64), ..*sample };
            let latents = sample_many(field, &bundles, &cfg, latent_dim, frame_rate)?;
            Ok(MinedPrompt { prompt: prompt.clone(), candidates: score_candidates(scorer, latents, Some(prompt)) })
        })
        .collect()
}

/// Turns mined candidates into preference pairs. With
/// [`WinnerSource::GroundTruth`] the winner of prompt `j` is the best of
/// `cfg.candidates` samples drawn from `ground_truth`.
pub fn pairs_from_mined<S: Scorer + ?Sized>(
    mined: &[MinedPrompt],
    cfg: &DpoConfig,
    ground_truth: Option<(&Dataset, &S)>,
) -> Result<Vec<PreferencePair>, PreferenceError> {
    let mut pairs = Vec::new();
    for (j, m) in mined.iter().enumerate() {
        if m.candidates.len() < 2 {
            warn!("prompt {j}: only {} scored candidates, skipped", m.candidates.len());
            continue;
        }
        let pair = match (cfg.winner_source, ground_truth) {
            (WinnerSource::Generated, _) => build_pairs(&m.candidates, &m.prompt, cfg)?,
            (WinnerSource::GroundTruth, Some((data, scorer))) => {
                let mut rng = rng_for(cfg.seed, stream::GT_POOL, j as u64);
                let picks: Vec<LatentSeq> = data
                    .samples
                    .choose_multiple(&mut rng, cfg.candidates.max(1))
                    .map(|s| s.latent.clone())
                    .collect();
                let gt = score_candidates(scorer, picks, Some(&m.prompt));
                if gt.is_empty() {
                    continue;
                }
                build_pair_with_ground_truth(&gt, &m.candidates, &m.prompt, cfg)?
            }
            (WinnerSource::GroundTruth, None) => {
                return Err(PreferenceError::Scoring("ground-truth winners need a dataset".into()))
            }
        };
        pairs.extend(pair);
    }
    Ok(pairs)
}

/// `softplus(x) = ln(1 + eˣ)`, stable for large |x|.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The DPO objective from the four regression errors.
pub fn dpo_objective(policy_w: f64, ref_w: f64, policy_l: f64, ref_l: f64, beta: f64) -> f64 {
    softplus(beta * ((policy_w - ref_w) - (policy_l - ref_l)))
}

/// One DPO training pair in tensor form.
#[derive(Debug, Clone)]
pub struct DpoExample {
    pub key: u64,
    pub winner: Array2<f64>,
    pub loser: Array2<f64>,
    pub cond: ConditionBundle,
}

impl DpoExample {
    pub fn from_pair(pair: &PreferencePair, conditioner: &Conditioner, key: u64) -> Result<Self, PreferenceError> {
        Ok(Self {
            key,
            winner: pair.winner.frames().to_owned(),
            loser: pair.loser.frames().to_owned(),
            cond: conditioner.bundle(&pair.prompt, pair.winner.len())?,
        })
    }
}

/// The shared draw of one pair: time, noise, and the regression inputs and
/// targets for winner and loser.
struct PairDraw {
    t: f64,
    y_w: Array2<f64>,
    target_w: Array2<f64>,
    y_l: Array2<f64>,
    target_l: Array2<f64>,
}

fn draw_pair(ex: &DpoExample, seed: u64, target: DpoTarget) -> Result<PairDraw, FieldError> {
    if ex.winner.dim() != ex.loser.dim() {
        return Err(FieldError::Shape("winner and loser differ in shape".into()));
    }
    let mut rng = rng_for(seed, stream::DPO, ex.key);
    let t: f64 = rng.random();
    let y_minus = Array2::from_shape_simple_fn(ex.winner.dim(), || rng.sample(StandardNormal));
    let w = sample_path_point(y_minus.view(), ex.winner.view(), t)?;
    let l = sample_path_point(y_minus.view(), ex.loser.view(), t)?;
    let (target_w, target_l) = match target {
        DpoTarget::Velocity => (w.u_t, l.u_t),
        DpoTarget::Noise => (y_minus.clone(), y_minus),
    };
    Ok(PairDraw { t, y_w: w.y_t, target_w, y_l: l.y_t, target_l })
}

fn regression_error<F: VelocityField + ?Sized>(
    field: &F,
    t: f64,
    y: ArrayView2<f64>,
    target: ArrayView2<f64>,
    c: &ConditionBundle,
) -> Result<f64, FieldError> {
    let v = field.velocity(t, y, c)?;
    Ok(mean_sq_diff(v.view(), target))
}

/// DPO loss of one pair for arbitrary policy and reference fields.
pub fn dpo_loss<P, R>(policy: &P, reference: &R, ex: &DpoExample, beta: f64, seed: u64, target: DpoTarget) -> Result<f64, FieldError>
where
    P: VelocityField + ?Sized,
    R: VelocityField + ?Sized,
{
    let d = draw_pair(ex, seed, target)?;
    let pw = regression_error(policy, d.t, d.y_w.view(), d.target_w.view(), &ex.cond)?;
    let rw = regression_error(reference, d.t, d.y_w.view(), d.target_w.view(), &ex.cond)?;
    let pl = regression_error(policy, d.t, d.y_l.view(), d.target_l.view(), &ex.cond)?;
    let rl = regression_error(reference, d.t, d.y_l.view(), d.target_l.view(), &ex.cond)?;
    Ok(dpo_objective(pw, rw, pl, rl, beta))
}

/// A minibatch of pairs against a frozen reference.
pub struct DpoBatch<'a> {
    pub examples: &'a [DpoExample],
    pub reference: &'a ModelParams,
    pub beta: f64,
    pub seed: u64,
    pub target: DpoTarget,
}

impl Objective for DpoBatch<'_> {
    fn batch_len(&self) -> usize {
        self.examples.len()
    }

    fn element_loss(&self, params: &ModelParams, index: usize) -> Result<f64, FieldError> {
        dpo_loss(params, self.reference, &self.examples[index], self.beta, self.seed, self.target)
    }

    fn element_loss_and_grad(&self, params: &ModelParams, index: usize) -> Result<(f64, ModelParams), FieldError> {
        let ex = &self.examples[index];
        let d = draw_pair(ex, self.seed, self.target)?;
        let (vw, trace_w) = forward_traced(params, d.t, d.y_w.view(), &ex.cond)?;
        let (vl, trace_l) = forward_traced(params, d.t, d.y_l.view(), &ex.cond)?;
        let rw = regression_error(self.reference, d.t, d.y_w.view(), d.target_w.view(), &ex.cond)?;
        let rl = regression_error(self.reference, d.t, d.y_l.view(), d.target_l.view(), &ex.cond)?;
        let res_w = &vw - &d.target_w;
        let res_l = &vl - &d.target_l;
        let n = res_w.len() as f64;
        let pw = res_w.iter().map(|x| x * x).sum::<f64>() / n;
        let pl = res_l.iter().map(|x| x * x).sum::<f64>() / n;
        let z = (pw - rw) - (pl - rl);
        let loss = softplus(self.beta * z);
        // ∂loss/∂z = β σ(βz); ∂z/∂v_w = 2 r_w / n, ∂z/∂v_l = −2 r_l / n
        let coef = self.beta * sigmoid(self.beta * z) * 2.0 / n;
        let mut grads = params.zeros_like();
        accumulate_backward(params, &trace_w, (res_w * coef).view(), &mut grads);
        accumulate_backward(params, &trace_l, (res_l * -coef).view(), &mut grads);
        Ok((loss, grads))
    }
}

/// AdamW on the mean DPO loss for `cfg.epochs` passes over `pairs`. The
/// reference is a frozen copy of the incoming parameters.
pub fn dpo_train(
    cfg: &DpoConfig,
    pairs: &[PreferencePair],
    conditioner: &Conditioner,
    mut state: TrainState,
) -> Result<(TrainState, Vec<EpochRecord>), TrainError> {
    if cfg.epochs == 0 {
        return Ok((state, Vec::new()));
    }
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let examples = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| DpoExample::from_pair(p, conditioner, i as u64))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| match e {
            PreferenceError::Condition(c) => TrainError::Condition(c),
            other => TrainError::Data(DataError::Format(other.to_string())),
        })?;
    let reference = state.params.clone();
    state.optim.config = cfg.adam;
    let batch_size = cfg.batch_size.max(1);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, stream::SHUFFLE, 1_000_000 + epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (batch, chunk) in order.chunks(batch_size).enumerate() {
            let step_seed = derive_seed(cfg.seed, stream::DPO, step);
            let minibatch: Vec<DpoExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let objective = DpoBatch {
                examples: &minibatch,
                reference: &reference,
                beta: cfg.beta,
                seed: step_seed,
                target: cfg.target,
            };
            let (loss, grads) = match loss_and_grad(&state.params, &objective) {
                Ok(v) => v,
                Err(FieldError::NonFinite { index }) => {
                    return Err(TrainError::NonFinite { epoch, batch, element: index, seed: step_seed })
                }
                Err(e) => return Err(e.into()),
            };
            adamw_step(&mut state.optim, &mut state.params, &grads);
            state.ema.update(&state.params);
            sum += loss;
            batches += 1;
            step += 1;
        }
        records.push(EpochRecord {
            epoch,
            stage: Stage::Dpo,
            mean_loss: sum / batches as f64,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    info!("dpo finished: {} pairs, {} steps, last epoch loss {:.5}", pairs.len(), step, records.last().unwrap().mean_loss);
    Ok((state, records))
}

const PAIR_MAGIC: &[u8; 4] = b"DRPP";
const PAIR_VERSION: u32 = 1;

fn write_latent(w: &mut Writer, x: &LatentSeq) {
    w.u32(x.len() as u32);
    w.u32(x.dim() as u32);
    w.f64(x.frame_rate());
    w.f64s(x.frames().iter().copied());
}

fn read_latent(r: &mut Reader<'_>) -> Result<LatentSeq, PreferenceError> {
    let len = r.u32().map_err(DataError::from)? as usize;
    let dim = r.u32().map_err(DataError::from)? as usize;
    let rate = r.f64().map_err(DataError::from)?;
    let data = r.f64s(len * dim).map_err(DataError::from)?;
    let frames = Array2::from_shape_vec((len, dim), data).map_err(|e| PreferenceError::Format(e.to_string()))?;
    Ok(LatentSeq::new(frames, rate)?)
}

/// Serializes pairs: header, then per pair the prompt (modality byte and
/// payload, then lyrics), winner, loser, and the two scores.
pub fn encode_pairs(pairs: &[PreferencePair]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(PAIR_MAGIC);
    w.u32(PAIR_VERSION);
    w.u32(pairs.len() as u32);
    for p in pairs {
        match &p.prompt.style {
            StylePrompt::Audio(x) => {
                w.u8(0);
                write_latent(&mut w, x);
            }
            StylePrompt::Text(tags) => {
                w.u8(1);
                w.u32(tags.len() as u32);
                tags.iter().for_each(|&t| w.u32(t));
            }
        }
        let lyrics = &p.prompt.lyrics;
        w.u32(lyrics.len() as u32);
        for (&tok, &start) in lyrics.token_ids().iter().zip(lyrics.start_frames()) {
            w.u32(tok);
            w.u32(start as u32);
        }
        write_latent(&mut w, &p.winner);
        write_latent(&mut w, &p.loser);
        w.f64(p.score_w.value);
        w.f64(p.score_l.value);
    }
    w.buf
}

pub fn decode_pairs(bytes: &[u8]) -> Result<Vec<PreferencePair>, PreferenceError> {
    let io = |e: std::io::Error| PreferenceError::Data(DataError::from(e));
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(io)? != PAIR_MAGIC {
        return Err(PreferenceError::Format("bad magic, expected DRPP".into()));
    }
    let version = r.u32().map_err(io)?;
    if version != PAIR_VERSION {
        return Err(PreferenceError::Format(format!("unsupported version {version}")));
    }
    let count = r.u32().map_err(io)? as usize;
    let mut pairs = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let style = match r.u8().map_err(io)? {
            0 => StylePrompt::Audio(read_latent(&mut r)?),
            1 => {
                let n = r.u32().map_err(io)? as usize;
                let mut tags = BTreeSet::new();
                for _ in 0..n {
                    tags.insert(r.u32().map_err(io)?);
                }
                StylePrompt::Text(tags)
            }
            m => return Err(PreferenceError::Format(format!("unknown modality byte {m}"))),
        };
        let n = r.u32().map_err(io)? as usize;
        let mut tokens = Vec::with_capacity(n.min(1 << 16));
        let mut starts = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            tokens.push(r.u32().map_err(io)?);
            starts.push(r.u32().map_err(io)? as usize);
        }
        let winner = read_latent(&mut r)?;
        let loser = read_latent(&mut r)?;
        let lyrics = LyricAlignment::new(tokens, starts, winner.len())?;
        let score = |v: f64| AestheticScore { value: v, source: ScoreSource::SongLike };
        let score_w = score(r.f64().map_err(io)?);
        let score_l = score(r.f64().map_err(io)?);
        pairs.push(PreferencePair { prompt: Prompt { style, lyrics }, winner, loser, score_w, score_l });
    }
    if r.remaining() != 0 {
        return Err(PreferenceError::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(pairs)
}

pub fn save_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<(), PreferenceError> {
    fs::write(path, encode_pairs(pairs)).map_err(DataError::from)?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>, PreferenceError> {
    decode_pairs(&fs::read(path).map_err(DataError::from)?)
}
