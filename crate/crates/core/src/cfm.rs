//! Conditional flow matching with the straight-path coupling.
//!
//! A noise draw `y⁻ ~ N(0, I)` and a data sample `y⁺` are joined by the path
//! `y_t = t·y⁺ + (1 − t)·y⁻` whose velocity is `u = y⁺ − y⁻`; the field is
//! regressed onto `u` at a uniformly drawn `t`. The loss is averaged over
//! batch, frames and channels.

use std::fmt;
use std::time::Instant;

use log::{debug, info};
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{apply_condition_dropout, training_style, ConditionBundle, ConditionError, Conditioner, ModalityMix, Prompt, StylePrompt};
use crate::field::{
    adamw_step, backward, forward_traced, loss_and_grad, AdamWConfig, FieldError, ModelParams, Objective, TrainState,
};
use crate::rng::{derive_seed, rng_for, stream};
use crate::synth::{perturb_alignment, random_alignment, DataError, Dataset, UNKNOWN_MODE};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss in epoch {epoch}, batch {batch} (element {element}); reproduce with seed {seed}")]
    NonFinite { epoch: usize, batch: usize, element: usize, seed: u64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A point on the straight path between a noise draw and a data sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub y_minus: Array2<f64>,
    pub y_plus: Array2<f64>,
    pub t: f64,
    pub y_t: Array2<f64>,
    pub u_t: Array2<f64>,
}

pub fn sample_path_point(y_minus: ArrayView2<f64>, y_plus: ArrayView2<f64>, t: f64) -> Result<PathSample, FieldError> {
    if y_minus.dim() != y_plus.dim() {
        return Err(FieldError::Shape(format!("noise {:?} vs data {:?}", y_minus.dim(), y_plus.dim())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(FieldError::Time(t));
    }
    let mut y_t = y_plus.to_owned();
    y_t.zip_mut_with(&y_minus, |p, &m| *p = t * *p + (1.0 - t) * m);
    let u_t = &y_plus - &y_minus;
    Ok(PathSample { y_minus: y_minus.to_owned(), y_plus: y_plus.to_owned(), t, y_t, u_t })
}

/// One training example. `key` identifies the example for random draws so
/// that reordering a batch reorders its draws with it.
#[derive(Debug, Clone)]
pub struct CfmExample {
    pub key: u64,
    pub y_plus: Array2<f64>,
    pub cond: ConditionBundle,
}

/// A minibatch together with the seed driving its `(t, y⁻)` draws and
/// condition dropout.
pub struct CfmBatch<'a> {
    pub examples: &'a [CfmExample],
    pub seed: u64,
    pub dropout: f64,
}

impl<'a> CfmBatch<'a> {
    pub fn new(examples: &'a [CfmExample], seed: u64, dropout: f64) -> Self {
        Self { examples, seed, dropout }
    }

    /// The path point and (possibly dropped) condition of element `i`.
    pub fn draw(&self, i: usize) -> Result<(PathSample, ConditionBundle), FieldError> {
        let ex = &self.examples[i];
        let mut rng = rng_for(self.seed, stream::PATH, ex.key);
        let t: f64 = rng.random();
        let y_minus = Array2::from_shape_simple_fn(ex.y_plus.dim(), || rng.sample(StandardNormal));
        let path = sample_path_point(y_minus.view(), ex.y_plus.view(), t)?;
        let cond = apply_condition_dropout(&ex.cond, self.dropout, derive_seed(self.seed, stream::DROPOUT, ex.key));
        Ok((path, cond))
    }

    /// Per-element losses for an arbitrary predictor.
    pub fn element_losses_with<F>(&self, mut predict: F) -> Result<Vec<f64>, FieldError>
    where
        F: FnMut(&PathSample, &ConditionBundle) -> Result<Array2<f64>, FieldError>,
    {
        (0..self.examples.len())
            .map(|i| {
                let (path, cond) = self.draw(i)?;
                let v = predict(&path, &cond)?;
                if v.dim() != path.u_t.dim() {
                    return Err(FieldError::Shape("prediction shape".into()));
                }
                Ok(mean_sq_diff(v.view(), path.u_t.view()))
            })
            .collect()
    }

    /// Mean loss for an arbitrary predictor, e.g. a test stub.
    pub fn loss_with<F>(&self, predict: F) -> Result<f64, FieldError>
    where
        F: FnMut(&PathSample, &ConditionBundle) -> Result<Array2<f64>, FieldError>,
    {
        if self.examples.is_empty() {
            return Err(FieldError::Shape("empty batch".into()));
        }
        let parts = self.element_losses_with(predict)?;
        let mut total = 0.0;
        for (index, l) in parts.iter().enumerate() {
            if !l.is_finite() {
                return Err(FieldError::NonFinite { index });
            }
            total += l;
        }
        Ok(total / parts.len() as f64)
    }
}

pub(crate) fn mean_sq_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    acc / a.len() as f64
}

impl Objective for CfmBatch<'_> {
    fn batch_len(&self) -> usize {
        self.examples.len()
    }

    fn element_loss(&self, params: &ModelParams, index: usize) -> Result<f64, FieldError> {
        let (path, cond) = self.draw(index)?;
        let v = crate::field::forward(params, path.t, path.y_t.view(), &cond)?;
        Ok(mean_sq_diff(v.view(), path.u_t.view()))
    }

    fn element_loss_and_grad(&self, params: &ModelParams, index: usize) -> Result<(f64, ModelParams), FieldError> {
        let (path, cond) = self.draw(index)?;
        let (v, trace) = forward_traced(params, path.t, path.y_t.view(), &cond)?;
        let r = &v - &path.u_t;
        let n = r.len() as f64;
        let loss = r.iter().map(|x| x * x).sum::<f64>() / n;
        let dout = r.mapv(|x| 2.0 * x / n);
        Ok((loss, backward(params, &trace, dout.view())))
    }
}

/// Mean flow-matching loss of `params` on `batch`.
pub fn cfm_loss(params: &ModelParams, batch: &CfmBatch<'_>) -> Result<f64, FieldError> {
    crate::field::batch_loss(params, batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Sft,
    Dpo,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Pretrain => 0,
            Stage::Sft => 1,
            Stage::Dpo => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stage::Pretrain),
            1 => Some(Stage::Sft),
            2 => Some(Stage::Dpo),
            _ => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of dropping style and lyrics, each independently.
    pub dropout: f64,
    pub seed: u64,
    /// Sequences longer than this are cropped.
    pub max_len: usize,
    pub adam: AdamWConfig,
    /// Lyric timing jitter in frames.
    pub jitter: usize,
    pub modality_mix: ModalityMix,
    pub max_lyric_tokens: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 40,
            batch_size: 16,
            dropout: 0.2,
            seed: 0,
            max_len: crate::synth::PRETRAIN_MAX_LEN,
            adam: AdamWConfig { lr: 1e-4, ..Default::default() },
            jitter: 1,
            modality_mix: ModalityMix::Mixed,
            max_lyric_tokens: 8,
        }
    }

    pub fn sft() -> Self {
        Self {
            stage: Stage::Sft,
            epochs: 10,
            max_len: crate::synth::FINETUNE_MAX_LEN,
            adam: AdamWConfig { lr: 1e-5, ..Default::default() },
            ..Self::pretrain()
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_loss: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch \t stage \t mean loss \t seconds`
    pub fn log_line(&self) -> String {
        format!("{}\t{}\t{:.10e}\t{:.3}", self.epoch, self.stage, self.mean_loss, self.seconds)
    }
}

/// The fixed lyrics of dataset sample `index`.
pub fn sample_lyrics(seed: u64, index: usize, len: usize, vocab: usize, max_tokens: usize) -> crate::synth::LyricAlignment {
    random_alignment(len, vocab as u32, max_tokens, derive_seed(seed, stream::LYRICS, index as u64))
}

/// Builds the conditioned example for dataset sample `index` at one step.
pub fn make_example(
    dataset: &Dataset,
    index: usize,
    conditioner: &Conditioner,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<CfmExample, TrainError> {
    let sample = &dataset.samples[index];
    let len = sample.latent.len().min(cfg.max_len);
    let y_plus = sample.latent.frames().slice(s![..len, ..]).to_owned();
    let mix = if sample.mode == UNKNOWN_MODE { ModalityMix::Audio } else { cfg.modality_mix };
    let style = training_style(
        &sample.latent,
        sample.mode,
        conditioner.projections.tag_vocab(),
        mix,
        derive_seed(step_seed, stream::PROMPT, index as u64),
    );
    let base = sample_lyrics(cfg.seed, index, len, conditioner.tokens.vocab(), cfg.max_lyric_tokens);
    let lyrics = perturb_alignment(&base, cfg.jitter, len, derive_seed(step_seed, stream::JITTER, index as u64))?;
    let cond = conditioner.bundle(&Prompt { style, lyrics }, len)?;
    Ok(CfmExample { key: index as u64, y_plus, cond })
}

/// Shuffled minibatch AdamW on the flow-matching loss with condition dropout
/// and EMA tracking. Returns the final state and one record per epoch.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    conditioner: &Conditioner,
    mut state: TrainState,
) -> Result<(TrainState, Vec<EpochRecord>), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.epochs == 0 {
        return Ok((state, Vec::new()));
    }
    state.optim.config = cfg.adam;
    let stage_seed = derive_seed(cfg.seed, stream::SHUFFLE, cfg.stage.tag() as u64);
    let batch_size = cfg.batch_size.max(1);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_for(stage_seed, stream::SHUFFLE, epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (batch, chunk) in order.chunks(batch_size).enumerate() {
            let step_seed = derive_seed(stage_seed, stream::PATH, step);
            let examples = chunk
                .iter()
                .map(|&i| make_example(dataset, i, conditioner, cfg, step_seed))
                .collect::<Result<Vec<_>, _>>()?;
            let objective = CfmBatch::new(&examples, step_seed, cfg.dropout);
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
        let record = EpochRecord {
            epoch,
            stage: cfg.stage,
            mean_loss: sum / batches as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        debug!("{}", record.log_line());
        records.push(record);
    }
    info!(
        "{} finished: {} epochs, {} steps, final loss {:.5}",
        cfg.stage,
        cfg.epochs,
        step,
        records.last().map(|r| r.mean_loss).unwrap_or(f64::NAN)
    );
    Ok((state, records))
}

/// Examples carrying the null condition, for purely unconditional use.
pub fn unconditional_examples(dataset: &Dataset, conditioner: &Conditioner) -> Vec<CfmExample> {
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| CfmExample {
            key: i as u64,
            y_plus: s.latent.frames().to_owned(),
            cond: conditioner.null_bundle(s.latent.len()),
        })
        .collect()
}

/// Open prompt: no style tags, the given lyrics.
pub fn open_prompt(lyrics: crate::synth::LyricAlignment) -> Prompt {
    Prompt { style: StylePrompt::open(), lyrics }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::synth::{make_mixture_dataset, MixtureMode, MixtureSpec};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conditioner() -> Conditioner {
        Conditioner::seeded(2, 8, 8, 16, 32, 1)
    }

    #[test]
    fn path_endpoints() {
        let p = sample_path_point(array![[0.0]].view(), array![[1.0]].view(), 0.5).unwrap();
        assert_eq!(p.y_t[[0, 0]], 0.5);
        assert_eq!(p.u_t[[0, 0]], 1.0);
        for t in [0.0, 0.3, 1.0] {
            let p = sample_path_point(array![[2.5, -1.0]].view(), array![[2.5, -1.0]].view(), t).unwrap();
            assert_eq!(p.y_t, array![[2.5, -1.0]]);
            assert_eq!(p.u_t, array![[0.0, 0.0]]);
        }
    }

    #[test]
    fn path_matches_direct_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Array2::from_shape_simple_fn((16, 2), || rng.random_range(-3.0..3.0));
        let b = Array2::from_shape_simple_fn((16, 2), || rng.random_range(-3.0..3.0));
        let p = sample_path_point(a.view(), b.view(), 0.3).unwrap();
        for ((&m, &pl), &yt) in a.iter().zip(b.iter()).zip(p.y_t.iter()) {
            assert!((yt - (0.3 * pl + 0.7 * m)).abs() <= 1e-15);
        }
        assert!(sample_path_point(a.view(), b.slice(s![..3, ..]), 0.3).is_err());
    }

    fn examples(n: usize, value: f64) -> Vec<CfmExample> {
        let c = conditioner();
        (0..n)
            .map(|i| CfmExample { key: i as u64, y_plus: Array2::from_elem((16, 2), value), cond: c.null_bundle(16) })
            .collect()
    }

    #[test]
    fn exact_predictor_has_zero_loss() {
        let ex = examples(4, 1.0);
        let batch = CfmBatch::new(&ex, 3, 0.2);
        assert_eq!(batch.loss_with(|p, _| Ok(p.u_t.clone())).unwrap(), 0.0);
    }

    #[test]
    fn zero_field_loss_on_zero_data_is_unit_variance() {
        let ex = examples(10_000, 0.0);
        let batch = CfmBatch::new(&ex, 5, 0.0);
        let loss = batch.loss_with(|p, _| Ok(Array2::zeros(p.u_t.dim()))).unwrap();
        // Var of the mean of 320k squared normals: 2 / 320k, sd ~ 0.0025
        assert!((loss - 1.0).abs() < 0.0125, "{loss}");
        let params = ModelParams::init(FieldConfig::default(), 1);
        let via_model = cfm_loss(&params, &batch).unwrap();
        assert!((via_model - loss).abs() < 1e-12);
    }

    #[test]
    fn doubling_residual_quadruples_loss() {
        let ex = examples(8, 0.7);
        let batch = CfmBatch::new(&ex, 9, 0.0);
        let zero = batch.loss_with(|p, _| Ok(Array2::zeros(p.u_t.dim()))).unwrap();
        let doubled = batch.loss_with(|p, _| Ok(-&p.u_t)).unwrap();
        assert_eq!(doubled, 4.0 * zero);
    }

    #[test]
    fn zero_field_baseline_closed_form() {
        // E‖y⁺ − y⁻‖² per entry = E[y⁺²] + 1 for the two-mode mixture
        let spec = MixtureSpec::two_mode_default();
        let ds = make_mixture_dataset(&spec, 4000, 2).unwrap();
        let ex = unconditional_examples(&ds, &conditioner());
        let batch = CfmBatch::new(&ex, 1, 0.0);
        let loss = batch.loss_with(|p, _| Ok(Array2::zeros(p.u_t.dim()))).unwrap();
        let second_moment: f64 = spec
            .modes
            .iter()
            .map(|m| m.weight * (m.mean.iter().map(|v| v * v).sum::<f64>() / 2.0 + m.stdev * m.stdev))
            .sum();
        assert!((loss - (second_moment + 1.0)).abs() < 0.1, "{loss} vs {}", second_moment + 1.0);
    }

    #[test]
    fn loss_is_invariant_to_batch_order() {
        let ds = make_mixture_dataset(&MixtureSpec::two_mode_default(), 12, 2).unwrap();
        let ex = unconditional_examples(&ds, &conditioner());
        let mut params = ModelParams::init(FieldConfig::default(), 3);
        params.layers_mut().last_mut().unwrap().weight.fill(0.05);
        let mut rev = ex.clone();
        rev.reverse();
        let a = CfmBatch::new(&ex, 7, 0.3);
        let b = CfmBatch::new(&rev, 7, 0.3);
        let mut pa: Vec<f64> = (0..12).map(|i| a.element_loss(&params, i).unwrap()).collect();
        let mut pb: Vec<f64> = (0..12).map(|i| b.element_loss(&params, i).unwrap()).collect();
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        assert_eq!(pa, pb);
        assert!((cfm_loss(&params, &a).unwrap() - cfm_loss(&params, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn full_dropout_ignores_prompt_contents() {
        let ds = make_mixture_dataset(&MixtureSpec::two_mode_default(), 6, 2).unwrap();
        let c1 = conditioner();
        let c2 = Conditioner::seeded(2, 8, 8, 16, 32, 77);
        let mut cfg = TrainConfig::pretrain();
        cfg.dropout = 1.0;
        let ex1: Vec<_> = (0..6).map(|i| make_example(&ds, i, &c1, &cfg, 5).unwrap()).collect();
        let ex2: Vec<_> = (0..6).map(|i| make_example(&ds, i, &c2, &cfg, 5).unwrap()).collect();
        assert_ne!(ex1[0].cond, ex2[0].cond);
        let mut params = ModelParams::init(FieldConfig::default(), 3);
        params.layers_mut().last_mut().unwrap().weight.fill(0.1);
        let (l1, g1) = loss_and_grad(&params, &CfmBatch::new(&ex1, 4, 1.0)).unwrap();
        let (l2, g2) = loss_and_grad(&params, &CfmBatch::new(&ex2, 4, 1.0)).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    fn tiny_dataset() -> Dataset {
        let spec = MixtureSpec {
            modes: vec![MixtureMode { mean: vec![1.0, -1.0], stdev: 0.3, weight: 1.0 }],
            seq_len: 8,
            dim: 2,
            frame_rate: 10.0,
        };
        make_mixture_dataset(&spec, 24, 1).unwrap()
    }

    fn fresh_state() -> TrainState {
        TrainState::fresh(ModelParams::init(FieldConfig::default(), 2), AdamWConfig::default(), 0.99, 100)
    }

    #[test]
    fn zero_epochs_returns_input() {
        let mut cfg = TrainConfig::pretrain();
        cfg.epochs = 0;
        let s0 = fresh_state();
        let (s, log) = train(&cfg, &tiny_dataset(), &conditioner(), s0.clone()).unwrap();
        assert_eq!(s, s0);
        assert_eq!(s.ema.shadow, s0.params);
        assert!(log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut cfg = TrainConfig::pretrain();
        cfg.epochs = 30;
        cfg.batch_size = 8;
        cfg.adam.lr = 3e-3;
        let ds = tiny_dataset();
        let (a, log) = train(&cfg, &ds, &conditioner(), fresh_state()).unwrap();
        let (b, _) = train(&cfg, &ds, &conditioner(), fresh_state()).unwrap();
        assert_eq!(a, b);
        assert_eq!(log.len(), 30);
        assert!(log.last().unwrap().mean_loss < 0.6 * log[0].mean_loss, "{log:?}");
        assert_eq!(a.optim.step, 90);
        assert_eq!(a.ema.counter, 90);
        let line = log[0].log_line();
        assert_eq!(line.split('\t').count(), 4);
        assert!(line.starts_with("0\tpretrain\t"));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut ds = tiny_dataset();
        ds.samples.clear();
        assert!(matches!(
            train(&TrainConfig::pretrain(), &ds, &conditioner(), fresh_state()),
            Err(TrainError::EmptyDataset)
        ));
    }
}
