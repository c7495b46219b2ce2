//! Run configuration: one flat JSON object, every key optional.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::cfm::{Stage, TrainConfig};
use crate::conditioning::{Conditioner, ModalityMix};
use crate::field::{AdamWConfig, FieldConfig};
use crate::metrics::BinGrid;
use crate::preference::{DpoConfig, DpoTarget, ModeAffinityScorer, ScoreSource, WinnerSource};
use crate::rng::{derive_seed, stream};
use crate::sampler::SampleConfig;
use crate::synth::{MixtureMode, MixtureSpec, FINETUNE_MAX_LEN, PRETRAIN_MAX_LEN};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config is not a JSON object: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    Type { key: String, message: String },
    #[error("config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

/// Style prompts used by the `sample` stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    /// Sample `i` asks for mode `i mod modes` by text tag.
    ModeTags,
    /// No style tags, lyrics only.
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // data
    pub seq_len: usize,
    pub latent_dim: usize,
    pub frame_rate: f64,
    pub n_train: usize,
    pub n_heldout: usize,
    pub mode_means: Vec<Vec<f64>>,
    pub mode_stdev: f64,
    pub mode_weights: Vec<f64>,

    // conditioning and model
    pub style_dim: usize,
    pub lyric_dim: usize,
    pub tag_vocab: usize,
    pub token_vocab: usize,
    pub max_lyric_tokens: usize,
    pub lyric_jitter: usize,
    pub modality_mix: ModalityMix,
    pub hidden: usize,
    pub layers: usize,

    // optimization
    pub pretrain_epochs: usize,
    pub sft_epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub lr_pretrain: f64,
    pub lr_sft: f64,
    pub lr_dpo: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub ema_interval: u64,
    pub max_len_pretrain: usize,
    pub max_len_sft: usize,
    pub sft_threshold: f64,

    // sampling
    pub steps: usize,
    pub cfg_scale: f64,
    pub use_ema: bool,
    pub n_samples: usize,
    pub sample_prompt: PromptKind,

    // preference optimization
    pub beta: f64,
    pub gap: f64,
    pub winner_floor: f64,
    pub dpo_epochs: usize,
    pub dpo_batch_size: usize,
    pub candidates: usize,
    pub dpo_prompts: usize,
    pub winner_source: WinnerSource,
    pub dpo_target: DpoTarget,
    pub scorer_mode: usize,
    pub scorer_scale: f64,
    pub scorer_source: ScoreSource,

    // evaluation
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_bins: usize,
    pub ablate_gaps: Vec<f64>,
    pub ablate_epochs: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = MixtureSpec::two_mode_default();
        let field = FieldConfig::default();
        let adam = AdamWConfig::default();
        let dpo = DpoConfig::default();
        let grid = BinGrid::default();
        Self {
            seed: 0,
            seq_len: spec.seq_len,
            latent_dim: spec.dim,
            frame_rate: spec.frame_rate,
            n_train: 2000,
            n_heldout: 500,
            mode_means: spec.modes.iter().map(|m| m.mean.clone()).collect(),
            mode_stdev: spec.modes[0].stdev,
            mode_weights: spec.modes.iter().map(|m| m.weight).collect(),
            style_dim: field.style_dim,
            lyric_dim: field.lyric_dim,
            tag_vocab: crate::conditioning::DEFAULT_TAG_VOCAB,
            token_vocab: crate::conditioning::DEFAULT_TOKEN_VOCAB,
            max_lyric_tokens: 8,
            lyric_jitter: 1,
            modality_mix: ModalityMix::Mixed,
            hidden: field.hidden,
            layers: field.layers,
            pretrain_epochs: 40,
            sft_epochs: 10,
            batch_size: 16,
            dropout: 0.2,
            lr_pretrain: 1e-4,
            lr_sft: 1e-5,
            lr_dpo: 1e-6,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            ema_decay: 0.99,
            ema_interval: 100,
            max_len_pretrain: PRETRAIN_MAX_LEN,
            max_len_sft: FINETUNE_MAX_LEN,
            sft_threshold: 3.0,
            steps: crate::sampler::DEFAULT_STEPS,
            cfg_scale: crate::sampler::DEFAULT_CFG_SCALE,
            use_ema: false,
            n_samples: 500,
            sample_prompt: PromptKind::ModeTags,
            beta: dpo.beta,
            gap: dpo.gap,
            winner_floor: dpo.winner_floor,
            dpo_epochs: dpo.epochs,
            dpo_batch_size: dpo.batch_size,
            candidates: dpo.candidates,
            dpo_prompts: 200,
            winner_source: dpo.winner_source,
            dpo_target: dpo.target,
            scorer_mode: 0,
            scorer_scale: 1.0,
            scorer_source: ScoreSource::SongLike,
            grid_lo: grid.lo,
            grid_hi: grid.hi,
            grid_bins: grid.bins,
            ablate_gaps: vec![0.0, 0.4, 0.8],
            ablate_epochs: vec![4, 8, 12],
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), reason: reason.into() }
}

fn check(ok: bool, key: &str, reason: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(key, reason))
    }
}

impl RunConfig {
    /// Parses JSON text; absent keys keep their defaults. Empty text is the
    /// default config.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let Value::Object(user) = value else {
            return Err(ConfigError::Syntax("top level must be an object".into()));
        };
        let mut cfg = Self::default();
        for (key, v) in user {
            cfg.set_value(&key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn as_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        }
    }

    /// Replaces one key. Validation of cross-key constraints is left to
    /// [`Self::validate`].
    pub fn set_value(&mut self, key: &str, value: Value) -> Result<(), ConfigError> {
        let mut map = self.as_map();
        if !map.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        map.insert(key.into(), value);
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| ConfigError::Type { key: key.into(), message: e.to_string() })?;
        Ok(())
    }

    /// `key=value` override; the value is read as JSON, or as a bare string
    /// when it is not valid JSON.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
        self.set_value(key, value)
    }

    pub fn keys() -> Vec<String> {
        Self::default().as_map().keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        let unit_open = |v: f64| (0.0..1.0).contains(&v);
        check(self.seq_len >= 1, "seq_len", "must be at least 1")?;
        check(self.latent_dim >= 1, "latent_dim", "must be at least 1")?;
        check(finite_pos(self.frame_rate), "frame_rate", "must be positive")?;
        check(self.n_train >= 1, "n_train", "must be at least 1")?;
        check(self.n_heldout >= 1, "n_heldout", "must be at least 1")?;
        check(!self.mode_means.is_empty(), "mode_means", "need at least one mode")?;
        check(
            self.mode_means.iter().all(|m| m.len() == self.latent_dim && m.iter().all(|v| v.is_finite())),
            "mode_means",
            "every mean needs latent_dim finite entries",
        )?;
        check(self.mode_stdev.is_finite() && self.mode_stdev >= 0.0, "mode_stdev", "must be non-negative")?;
        check(self.mode_weights.len() == self.mode_means.len(), "mode_weights", "one weight per mode")?;
        check(
            self.mode_weights.iter().all(|w| w.is_finite() && *w >= 0.0) && self.mode_weights.iter().sum::<f64>() > 0.0,
            "mode_weights",
            "weights must be non-negative with a positive sum",
        )?;
        check(self.tag_vocab >= 1, "tag_vocab", "must be at least 1")?;
        check(self.token_vocab >= 1, "token_vocab", "must be at least 1")?;
        check(self.hidden >= 1, "hidden", "must be at least 1")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check((0.0..=1.0).contains(&self.dropout), "dropout", "must lie in [0, 1]")?;
        for (key, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_sft", self.lr_sft), ("lr_dpo", self.lr_dpo)] {
            check(finite_pos(lr), key, "must be positive")?;
        }
        check(unit_open(self.adam_beta1), "adam_beta1", "must lie in [0, 1)")?;
        check(unit_open(self.adam_beta2), "adam_beta2", "must lie in [0, 1)")?;
        check(finite_pos(self.adam_eps), "adam_eps", "must be positive")?;
        check(self.weight_decay.is_finite() && self.weight_decay >= 0.0, "weight_decay", "must be non-negative")?;
        check(self.ema_decay > 0.0 && self.ema_decay < 1.0, "ema_decay", "must lie in (0, 1)")?;
        check(self.ema_interval >= 1, "ema_interval", "must be at least 1")?;
        check(self.max_len_pretrain >= 1, "max_len_pretrain", "must be at least 1")?;
        check(self.max_len_sft >= 1, "max_len_sft", "must be at least 1")?;
        check((1.0..=5.0).contains(&self.sft_threshold), "sft_threshold", "must lie on the 1-5 scale")?;
        check(self.steps >= 1, "steps", "must be at least 1")?;
        check(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0, "cfg_scale", "must be non-negative")?;
        check(self.n_samples >= 1, "n_samples", "must be at least 1")?;
        check(finite_pos(self.beta), "beta", "must be positive")?;
        check(self.gap.is_finite() && self.gap >= 0.0, "gap", "must be non-negative")?;
        check((1.0..=5.0).contains(&self.winner_floor), "winner_floor", "must lie on the 1-5 scale")?;
        check(self.dpo_batch_size >= 1, "dpo_batch_size", "must be at least 1")?;
        check(self.candidates >= 2, "candidates", "must be at least 2")?;
        check(self.dpo_prompts >= 1, "dpo_prompts", "must be at least 1")?;
        check(self.scorer_mode < self.mode_means.len(), "scorer_mode", "must name an existing mode")?;
        check(finite_pos(self.scorer_scale), "scorer_scale", "must be positive")?;
        check(self.grid_bins >= 1, "grid_bins", "must be at least 1")?;
        check(self.grid_lo.is_finite() && self.grid_hi.is_finite() && self.grid_lo < self.grid_hi, "grid_hi", "must exceed grid_lo")?;
        check(
            !self.ablate_gaps.is_empty() && self.ablate_gaps.iter().all(|g| g.is_finite() && *g >= 0.0),
            "ablate_gaps",
            "need at least one non-negative gap",
        )?;
        check(!self.ablate_epochs.is_empty(), "ablate_epochs", "need at least one value")?;
        Ok(())
    }

    pub fn mixture_spec(&self) -> MixtureSpec {
        MixtureSpec {
            modes: self
                .mode_means
                .iter()
                .zip(&self.mode_weights)
                .map(|(m, &w)| MixtureMode { mean: m.clone(), stdev: self.mode_stdev, weight: w })
                .collect(),
            seq_len: self.seq_len,
            dim: self.latent_dim,
            frame_rate: self.frame_rate,
        }
    }

    pub fn field_config(&self) -> FieldConfig {
        FieldConfig {
            latent_dim: self.latent_dim,
            style_dim: self.style_dim,
            lyric_dim: self.lyric_dim,
            hidden: self.hidden,
            layers: self.layers,
        }
    }

    pub fn conditioner(&self) -> Conditioner {
        Conditioner::seeded(self.latent_dim, self.style_dim, self.lyric_dim, self.tag_vocab, self.token_vocab, self.seed)
    }

    pub fn adam(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn train_config(&self, stage: Stage) -> TrainConfig {
        let (epochs, lr, max_len) = match stage {
            Stage::Sft => (self.sft_epochs, self.lr_sft, self.max_len_sft),
            _ => (self.pretrain_epochs, self.lr_pretrain, self.max_len_pretrain),
        };
        TrainConfig {
            stage,
            epochs,
            batch_size: self.batch_size,
            dropout: self.dropout,
            seed: self.seed,
            max_len,
            adam: self.adam(lr),
            jitter: self.lyric_jitter,
            modality_mix: self.modality_mix,
            max_lyric_tokens: self.max_lyric_tokens,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            seed: derive_seed(self.seed, stream::EVAL, 0),
            use_ema: self.use_ema,
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            beta: self.beta,
            gap: self.gap,
            winner_floor: self.winner_floor,
            epochs: self.dpo_epochs,
            adam: self.adam(self.lr_dpo),
            batch_size: self.dpo_batch_size,
            candidates: self.candidates,
            winner_source: self.winner_source,
            target: self.dpo_target,
            seed: derive_seed(self.seed, stream::DPO, 0),
        }
    }

    pub fn scorer(&self) -> ModeAffinityScorer {
        ModeAffinityScorer {
            target: self.mode_means[self.scorer_mode].clone(),
            scale: self.scorer_scale,
            source: self.scorer_source,
        }
    }

    pub fn grid(&self) -> BinGrid {
        BinGrid { lo: self.grid_lo, hi: self.grid_hi, bins: self.grid_bins }
    }
}

/// Reads, validates and logs a config file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let cfg = RunConfig::from_json(&text)?;
    info!("resolved config: {}", serde_json::to_string(&cfg).expect("config serializes"));
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_defaults() {
        let cfg = RunConfig::from_json("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert_eq!((cfg.steps, cfg.cfg_scale, cfg.beta, cfg.gap, cfg.winner_floor), (32, 4.0, 2000.0, 0.4, 3.0));
        assert_eq!((cfg.ema_decay, cfg.ema_interval, cfg.dropout), (0.99, 100, 0.2));
        assert_eq!((cfg.adam_beta1, cfg.adam_beta2), (0.9, 0.95));
        assert_eq!((cfg.lr_pretrain, cfg.lr_sft, cfg.lr_dpo), (1e-4, 1e-5, 1e-6));
        assert_eq!((cfg.sft_epochs, cfg.dpo_epochs), (10, 8));
        cfg.validate().unwrap();
    }

    #[test]
    fn constraint_violations_name_the_key() {
        let err = RunConfig::from_json(r#"{"cfg_scale": -1}"#).unwrap_err();
        assert!(matches!(&err, ConfigError::Invalid { key, .. } if key == "cfg_scale"), "{err}");
        let err = RunConfig::from_json(r#"{"dropout": 1.5}"#).unwrap_err();
        assert!(err.to_string().contains("dropout"));
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        let err = RunConfig::from_json(r#"{"cfg_scal": 3}"#).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "cfg_scal"));
        let err = RunConfig::from_json(r#"{"steps": "many"}"#).unwrap_err();
        assert!(matches!(&err, ConfigError::Type { key, .. } if key == "steps"), "{err}");
        let err = RunConfig::from_json(r#"{"winner_source": "oracle"}"#).unwrap_err();
        assert!(err.to_string().contains("winner_source"));
        assert!(matches!(RunConfig::from_json("[1, 2]"), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("beta", "500").unwrap();
        cfg.set("winner_source", "ground-truth").unwrap();
        cfg.set("ablate_gaps", "[0.1, 0.2]").unwrap();
        cfg.set("seed", "18446744073709551615").unwrap();
        let again = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.winner_source, WinnerSource::GroundTruth);
        assert_eq!(again.seed, u64::MAX);
    }

    #[test]
    fn cross_key_checks() {
        assert!(RunConfig::from_json(r#"{"latent_dim": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"scorer_mode": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"candidates": 1}"#).is_err());
    }

    #[test]
    fn derived_configs_follow_keys() {
        let cfg = RunConfig::from_json(r#"{"lr_sft": 2e-5, "hidden": 12}"#).unwrap();
        assert_eq!(cfg.train_config(Stage::Sft).adam.lr, 2e-5);
        assert_eq!(cfg.train_config(Stage::Sft).epochs, 10);
        assert_eq!(cfg.field_config().hidden, 12);
        assert_eq!(cfg.dpo_config().beta, 2000.0);
        assert_eq!(cfg.mixture_spec(), MixtureSpec::two_mode_default());
    }
}
