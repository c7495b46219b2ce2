//! Binary checkpoints.
//!
//! Layout, little-endian:
//!
//! ```text
//! "DRPC" | u32 version | u32 tensor count
//! per tensor: u16 name length | name | u8 ndim | u32 dims… | f64 payload
//! u32 CRC32 of every byte between the header and the checksum
//! ```
//!
//! Scalars (step counters, seeds, hyperparameters) travel in the `meta.*`
//! tensors as raw bit patterns so they round-trip exactly.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::config::RunConfig;
use crate::binio::{Reader, Writer};
use crate::cfm::Stage;
use crate::conditioning::{Conditioner, ProjectionTable, TokenEmbeddingTable};
use crate::field::{AdamWConfig, EmaState, ModelParams, OptimState, TrainState};

const MAGIC: &[u8; 4] = b"DRPC";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint malformed: {0}")]
    Malformed(String),
    #[error("checkpoint io on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Everything needed to resume or sample: parameters, EMA shadow, AdamW
/// moments, the conditioning tables, the config that produced them, the stage
/// that wrote them, and the seed from which every random stream derives.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: Stage,
    pub state: TrainState,
    pub conditioner: Conditioner,
    pub rng_seed: u64,
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), dims, data }
    }

    fn matrix(name: &str, a: &Array2<f64>) -> Self {
        Self::new(name, a.shape().to_vec(), a.iter().copied().collect())
    }
}

fn bits(v: u64) -> f64 {
    f64::from_bits(v)
}

fn params_tensors(prefix: &str, p: &ModelParams, out: &mut Vec<Tensor>) {
    for (name, shape, data) in p.tensors() {
        out.push(Tensor::new(format!("{prefix}.{name}"), shape, data.to_vec()));
    }
}

impl Checkpoint {
    fn tensors(&self) -> Vec<Tensor> {
        let s = &self.state;
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = s.optim.config;
        let meta = vec![
            bits(s.optim.step),
            bits(s.ema.counter),
            s.ema.decay,
            bits(s.ema.interval),
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            bits(self.stage.tag() as u64),
            bits(self.rng_seed),
        ];
        let config: Vec<f64> = serde_json::to_string(&self.config)
            .expect("config serializes")
            .bytes()
            .map(f64::from)
            .collect();
        let mut out = vec![
            Tensor::new("meta.state", vec![meta.len()], meta),
            Tensor::new("meta.config", vec![config.len()], config),
        ];
        params_tensors("params", &s.params, &mut out);
        params_tensors("ema", &s.ema.shadow, &mut out);
        params_tensors("adam_m", &s.optim.m, &mut out);
        params_tensors("adam_v", &s.optim.v, &mut out);
        out.push(Tensor::matrix("cond.audio", &self.conditioner.projections.audio));
        out.push(Tensor::matrix("cond.text", &self.conditioner.projections.text));
        out.push(Tensor::matrix("cond.tokens", &self.conditioner.tokens.table));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(tensors.len() as u32);
        for t in &tensors {
            w.u16(t.name.len() as u16);
            w.bytes(t.name.as_bytes());
            w.u8(t.dims.len() as u8);
            t.dims.iter().for_each(|&d| w.u32(d as u32));
            w.f64s(t.data.iter().copied());
        }
        let crc = crc32fast::hash(&w.buf[HEADER_LEN..]);
        w.u32(crc);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        if bytes.len() < 8 {
            return Err(if bytes.len() >= 4 && &bytes[..4] != MAGIC { PersistError::Magic } else { PersistError::Truncated });
        }
        if &bytes[..4] != MAGIC {
            return Err(PersistError::Magic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(PersistError::Version(version));
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(PersistError::Truncated);
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(&body[HEADER_LEN..]);
        let mut r = Reader::new(&body[HEADER_LEN..]);
        let mut tensors = Vec::with_capacity(count.min(1024));
        let parsed = (|| -> std::io::Result<()> {
            for _ in 0..count {
                let name_len = r.u16()? as usize;
                let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
                let ndim = r.u8()? as usize;
                let mut dims = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    dims.push(r.u32()? as usize);
                }
                let n = dims
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                    .ok_or_else(|| std::io::Error::from(std::io::ErrorKind::UnexpectedEof))?;
                tensors.push(Tensor { name, dims, data: r.f64s(n)? });
            }
            Ok(())
        })();
        // a short file reads as truncation, a flipped byte as a checksum failure
        if parsed.is_err() || r.remaining() != 0 {
            return Err(if stored != computed && parsed.is_ok() {
                PersistError::Checksum { stored, computed }
            } else {
                PersistError::Truncated
            });
        }
        if stored != computed {
            return Err(PersistError::Checksum { stored, computed });
        }
        Self::from_tensors(tensors)
    }

    fn from_tensors(tensors: Vec<Tensor>) -> Result<Self, PersistError> {
        let bad = |m: String| PersistError::Malformed(m);
        let mut it = tensors.into_iter();
        let mut next = |want: &str| -> Result<Tensor, PersistError> {
            let t = it.next().ok_or_else(|| bad(format!("missing tensor {want}")))?;
            if t.name != want {
                return Err(bad(format!("expected tensor {want}, found {}", t.name)));
            }
            Ok(t)
        };
        let meta = next("meta.state")?.data;
        if meta.len() != 11 {
            return Err(bad(format!("meta.state has {} entries", meta.len())));
        }
        let config_bytes: Vec<u8> = next("meta.config")?.data.iter().map(|&b| b as u8).collect();
        let config: RunConfig =
            serde_json::from_slice(&config_bytes).map_err(|e| bad(format!("embedded config: {e}")))?;
        let field = config.field_config();
        let template = ModelParams::zeros(field);
        let mut read_params = |prefix: &str| -> Result<ModelParams, PersistError> {
            let mut parts = Vec::new();
            for (name, _, _) in template.tensors() {
                let t = next(&format!("{prefix}.{name}"))?;
                parts.push((name, t.dims, t.data));
            }
            ModelParams::from_tensors(field, &parts).map_err(|e| bad(e.to_string()))
        };
        let params = read_params("params")?;
        let shadow = read_params("ema")?;
        let m = read_params("adam_m")?;
        let v = read_params("adam_v")?;
        let mut matrix = |name: &str| -> Result<Array2<f64>, PersistError> {
            let t = next(name)?;
            if t.dims.len() != 2 {
                return Err(bad(format!("{name} is not a matrix")));
            }
            Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data).map_err(|e| bad(e.to_string()))
        };
        let conditioner = Conditioner {
            projections: ProjectionTable { audio: matrix("cond.audio")?, text: matrix("cond.text")? },
            tokens: TokenEmbeddingTable { table: matrix("cond.tokens")? },
        };
        if it.next().is_some() {
            return Err(bad("unexpected trailing tensors".into()));
        }
        let stage_tag = meta[9].to_bits();
        let stage = u8::try_from(stage_tag)
            .ok()
            .and_then(Stage::from_tag)
            .ok_or_else(|| bad(format!("unknown stage tag {stage_tag}")))?;
        let adam = AdamWConfig { lr: meta[4], beta1: meta[5], beta2: meta[6], eps: meta[7], weight_decay: meta[8] };
        let state = TrainState {
            params,
            optim: OptimState { config: adam, m, v, step: meta[0].to_bits() },
            ema: EmaState { shadow, decay: meta[2], interval: meta[3].to_bits(), counter: meta[1].to_bits() },
        };
        Ok(Self { config, stage, state, conditioner, rng_seed: meta[10].to_bits() })
    }

    pub fn save(&self, path: &Path) -> Result<(), PersistError> {
        fs::write(path, self.to_bytes()).map_err(|source| PersistError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, PersistError> {
        let bytes = fs::read(path).map_err(|source| PersistError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}
