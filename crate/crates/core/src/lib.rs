//! Desk-scale laboratory for conditional flow matching with preference optimization.
//!
//! The crate trains a per-frame conditional vector field on synthetic latent
//! sequences, samples it with a guided Euler solver, mines win-lose pairs with
//! pluggable aesthetic scorers and fine-tunes the field with a flow-matching
//! variant of diffusion DPO. Distribution metrics (Fréchet distance, KL, RTF)
//! and a small file-based pipeline tie the stages together.
//!
//! Module map:
//! - [`synth`]: mixture datasets, lyric alignments, dataset files
//! - [`conditioning`]: style and lyric embeddings, condition dropout
//! - [`field`]: the vector field network, AdamW and EMA
//! - [`cfm`]: flow-matching objective and the staged training loop
//! - [`sampler`]: classifier-free guided Euler sampling
//! - [`preference`]: scoring, pair mining, SFT filtering, DPO
//! - [`metrics`]: Fréchet distance, KL divergence, real-time factor
//! - [`pipeline`]: run configuration, checkpoints and pipeline stages

pub mod cfm;
pub mod conditioning;
pub mod field;
pub mod metrics;
pub mod pipeline;
pub mod preference;
pub mod rng;
pub mod sampler;
pub mod synth;

pub(crate) mod binio;
