//! Synthetic latent datasets.
//!
//! A [`Dataset`] is a list of [`LatentSeq`] samples drawn from a Gaussian
//! mixture: the mode is chosen once per sequence and every frame of the
//! sequence is an independent draw from that mode. Lyric alignments are
//! generated alongside and can be jittered with [`perturb_alignment`].

use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::distr::{Distribution, Uniform};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{Reader, Writer};

/// Sequence length used when nothing else is configured.
pub const DEFAULT_SEQ_LEN: usize = 16;
/// Latent channel count used when nothing else is configured.
pub const DEFAULT_LATENT_DIM: usize = 2;
/// Maximum sequence lengths of the two large-scale training stages. Recorded
/// for completeness; the desk-scale runs never reach them.
pub const PRETRAIN_MAX_LEN: usize = 2048;
pub const FINETUNE_MAX_LEN: usize = 6144;

/// Mode label written for samples of unknown origin (e.g. generated ones).
pub const UNKNOWN_MODE: u32 = u32::MAX;

const DATASET_MAGIC: &[u8; 4] = b"DRPD";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid mixture spec: {0}")]
    InvalidSpec(String),
    #[error("invalid latent sequence: {0}")]
    InvalidLatent(String),
    #[error("invalid lyric alignment: {0}")]
    InvalidAlignment(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An `L × D` latent sequence with its frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    frames: Array2<f64>,
    frame_rate: f64,
}

impl LatentSeq {
    pub fn new(frames: Array2<f64>, frame_rate: f64) -> Result<Self, DataError> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(DataError::InvalidLatent(format!(
                "shape {:?} must be non-empty",
                frames.dim()
            )));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(DataError::InvalidLatent(format!(
                "frame rate {frame_rate} must be positive"
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DataError::InvalidLatent("non-finite entry".into()));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frames(&self) -> ArrayView2<'_, f64> {
        self.frames.view()
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.frame_rate
    }

    /// Average frame vector.
    pub fn mean_frame(&self) -> Array1<f64> {
        let mut acc = Array1::zeros(self.dim());
        for row in self.frames.rows() {
            acc += &row;
        }
        acc / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMode {
    pub mean: Vec<f64>,
    pub stdev: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub modes: Vec<MixtureMode>,
    pub seq_len: usize,
    pub dim: usize,
    pub frame_rate: f64,
}

impl MixtureSpec {
    /// The two-mode 2-D mixture used throughout the desk experiments.
    pub fn two_mode_default() -> Self {
        Self {
            modes: vec![
                MixtureMode { mean: vec![3.0, 2.0], stdev: 0.5, weight: 0.5 },
                MixtureMode { mean: vec![1.0, 2.0], stdev: 0.5, weight: 0.5 },
            ],
            seq_len: DEFAULT_SEQ_LEN,
            dim: DEFAULT_LATENT_DIM,
            frame_rate: 10.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.modes.is_empty() {
            return bad("at least one mode is required".into());
        }
        if self.seq_len == 0 || self.dim == 0 {
            return bad("seq_len and dim must be positive".into());
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return bad(format!("frame_rate {} must be positive", self.frame_rate));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if m.mean.len() != self.dim {
                return bad(format!("mode {k}: mean has {} entries, dim is {}", m.mean.len(), self.dim));
            }
            if m.mean.iter().any(|v| !v.is_finite()) {
                return bad(format!("mode {k}: non-finite mean"));
            }
            // stdev = 0 is the degenerate point mass and is allowed.
            if !(m.stdev.is_finite() && m.stdev >= 0.0) {
                return bad(format!("mode {k}: stdev {} must be non-negative", m.stdev));
            }
            if !(m.weight.is_finite() && m.weight > 0.0) {
                return bad(format!("mode {k}: weight {} must be positive", m.weight));
            }
        }
        Ok(())
    }

    /// Mode weights normalized to sum to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        self.modes.iter().map(|m| m.weight / total).collect()
    }

    /// Index of the mode whose mean is closest to `point`.
    pub fn nearest_mode(&self, point: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.modes.iter().enumerate() {
            let d: f64 = m.mean.iter().zip(point).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub latent: LatentSeq,
    /// Ground-truth mode, or [`UNKNOWN_MODE`].
    pub mode: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seq_len: usize,
    pub dim: usize,
    pub frame_rate: f64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Builds a dataset of generated latents with unknown mode labels.
    pub fn from_latents(latents: Vec<LatentSeq>) -> Result<Self, DataError> {
        let first = latents
            .first()
            .ok_or_else(|| DataError::Format("no samples".into()))?;
        let (seq_len, dim, frame_rate) = (first.len(), first.dim(), first.frame_rate());
        if latents.iter().any(|l| l.len() != seq_len || l.dim() != dim) {
            return Err(DataError::Format("samples differ in shape".into()));
        }
        Ok(Self {
            seq_len,
            dim,
            frame_rate,
            samples: latents.into_iter().map(|latent| Sample { latent, mode: UNKNOWN_MODE }).collect(),
        })
    }

    pub fn latents(&self) -> impl Iterator<Item = &LatentSeq> {
        self.samples.iter().map(|s| &s.latent)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.samples.len() as u32);
        w.u32(self.seq_len as u32);
        w.u32(self.dim as u32);
        w.f64(self.frame_rate);
        for s in &self.samples {
            w.u32(s.mode);
            w.f64s(s.latent.frames().iter().copied());
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(DataError::Format("bad magic, expected DRPD".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let seq_len = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let frame_rate = r.f64()?;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mode = r.u32()?;
            let data = r.f64s(seq_len * dim)?;
            let frames = Array2::from_shape_vec((seq_len, dim), data)
                .map_err(|e| DataError::Format(e.to_string()))?;
            samples.push(Sample { latent: LatentSeq::new(frames, frame_rate)?, mode });
        }
        if r.remaining() != 0 {
            return Err(DataError::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { seq_len, dim, frame_rate, samples })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Draws `n` sequences from `spec`. Sample `i` uses the seed `seed ^ i`, so
/// the output is the same however the work is split.
pub fn make_mixture_dataset(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::InvalidSpec("n must be at least 1".into()));
    }
    let weights = spec.normalized_weights();
    let samples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let mode = pick_index(&weights, rng.random::<f64>());
            let m = &spec.modes[mode];
            let frames = Array2::from_shape_fn((spec.seq_len, spec.dim), |(_, d)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m.mean[d] + m.stdev * z
            });
            Sample {
                latent: LatentSeq { frames, frame_rate: spec.frame_rate },
                mode: mode as u32,
            }
        })
        .collect();
    Ok(Dataset { seq_len: spec.seq_len, dim: spec.dim, frame_rate: spec.frame_rate, samples })
}

fn pick_index(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Token ids paired with the frame each token starts on.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LyricAlignment {
    token_ids: Vec<u32>,
    start_frames: Vec<usize>,
}

impl LyricAlignment {
    pub fn new(token_ids: Vec<u32>, start_frames: Vec<usize>, len: usize) -> Result<Self, DataError> {
        let a = Self { token_ids, start_frames };
        a.validate(len)?;
        Ok(a)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self, len: usize) -> Result<(), DataError> {
        if self.token_ids.len() != self.start_frames.len() {
            return Err(DataError::InvalidAlignment(format!(
                "{} tokens but {} start frames",
                self.token_ids.len(),
                self.start_frames.len()
            )));
        }
        if self.start_frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::InvalidAlignment("start frames must be strictly increasing".into()));
        }
        if let Some(&last) = self.start_frames.last() {
            if last >= len {
                return Err(DataError::InvalidAlignment(format!("start frame {last} outside [0, {len})")));
            }
        }
        Ok(())
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn start_frames(&self) -> &[usize] {
        &self.start_frames
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Random alignment with between one and `max_tokens` tokens at distinct frames.
pub fn random_alignment(len: usize, vocab: u32, max_tokens: usize, seed: u64) -> LyricAlignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upper = max_tokens.clamp(1, len);
    let count = rng.random_range(1..=upper);
    let mut starts = index::sample(&mut rng, len, count).into_vec();
    starts.sort_unstable();
    let token_ids = (0..count).map(|_| rng.random_range(0..vocab)).collect();
    LyricAlignment { token_ids, start_frames: starts }
}

/// Jitters every start frame by an integer drawn uniformly from
/// `[-jitter, jitter]`, keeping token order.
pub fn perturb_alignment(
    a: &LyricAlignment,
    jitter: usize,
    len: usize,
    seed: u64,
) -> Result<LyricAlignment, DataError> {
    a.validate(len)?;
    if jitter == 0 {
        return Ok(a.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = jitter as i64;
    let dist = Uniform::new_inclusive(-j, j).expect("valid range");
    let offsets: Vec<i64> = (0..a.len()).map(|_| dist.sample(&mut rng)).collect();
    apply_offsets(a, &offsets, len)
}

/// Shifts, clamps into `[0, len)`, sorts the frame multiset and then separates
/// collisions by pushing later tokens forward. When pushing runs past the end
/// the tail is compacted backwards instead.
pub fn apply_offsets(a: &LyricAlignment, offsets: &[i64], len: usize) -> Result<LyricAlignment, DataError> {
    if offsets.len() != a.len() {
        return Err(DataError::InvalidAlignment("one offset per token required".into()));
    }
    if a.len() > len {
        return Err(DataError::InvalidAlignment(format!(
            "{} tokens cannot fit in {len} frames",
            a.len()
        )));
    }
    let last = len as i64 - 1;
    let mut starts: Vec<i64> = a
        .start_frames
        .iter()
        .zip(offsets)
        .map(|(&s, &o)| (s as i64 + o).clamp(0, last))
        .collect();
    starts.sort_unstable();
    for i in 1..starts.len() {
        if starts[i] <= starts[i - 1] {
            starts[i] = starts[i - 1] + 1;
        }
    }
    if let Some(&tail) = starts.last() {
        if tail > last {
            let n = starts.len();
            starts[n - 1] = last;
            for i in (0..n - 1).rev() {
                if starts[i] >= starts[i + 1] {
                    starts[i] = starts[i + 1] - 1;
                }
            }
            if starts[0] < 0 {
                return Err(DataError::InvalidAlignment("collisions cannot be resolved".into()));
            }
        }
    }
    Ok(LyricAlignment {
        token_ids: a.token_ids.clone(),
        start_frames: starts.into_iter().map(|s| s as usize).collect(),
    })
}
