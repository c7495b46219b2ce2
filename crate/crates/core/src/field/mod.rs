//! The conditional vector field `v(t, y, c)`.
//!
//! Every frame is processed independently: the frame's latent vector, the
//! style embedding, the frame's lyric embedding and sinusoidal timestep
//! features are concatenated and passed through a tanh MLP whose last layer
//! maps back to the latent width. Gradients are computed by hand.

mod optim;

pub use optim::{adamw_step, AdamWConfig, EmaState, OptimState, TrainState};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::ConditionBundle;
use crate::rng::{rng_for, stream};

/// Width of the timestep encoding: four frequencies, sine and cosine.
pub const TIME_FEATURES: usize = 8;
/// Timesteps in `[0, 1]` are scaled to `[0, 1000]` before the sinusoids.
pub const TIME_SCALE: f64 = 1000.0;
const TIME_BASE: f64 = 10_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("time {0} outside [0, 1]")]
    Time(f64),
    #[error("non-finite loss at batch element {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub latent_dim: usize,
    pub style_dim: usize,
    pub lyric_dim: usize,
    pub hidden: usize,
    /// Number of hidden `H → H` layers.
    pub layers: usize,
}

impl FieldConfig {
    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.style_dim + self.lyric_dim + TIME_FEATURES
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { latent_dim: 2, style_dim: 8, lyric_dim: 8, hidden: 64, layers: 2 }
    }
}

/// A fully connected layer, `x · weight + bias` with `weight` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Array2::zeros((input, output)), bias: Array1::zeros(output) }
    }
}

/// Parameters of the field: input projection, hidden layers, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: FieldConfig,
    layers: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(config: FieldConfig) -> Self {
        let h = config.hidden;
        let mut layers = vec![Dense::zeros(config.input_dim(), h)];
        layers.extend((0..config.layers).map(|_| Dense::zeros(h, h)));
        layers.push(Dense::zeros(h, config.latent_dim));
        Self { config, layers }
    }

    /// Uniform fan-in initialization of every layer but the output
    /// projection, which starts at zero.
    pub fn init(config: FieldConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = rng_for(seed, stream::INIT, 0);
        let n = p.layers.len();
        for layer in &mut p.layers[..n - 1] {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    fn layer_name(&self, i: usize) -> String {
        if i == 0 {
            "input".into()
        } else if i == self.layers.len() - 1 {
            "output".into()
        } else {
            format!("hidden.{}", i - 1)
        }
    }

    /// `(name, shape, data)` for every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let name = self.layer_name(i);
            out.push((format!("{name}.weight"), l.weight.shape().to_vec(), l.weight.as_slice().unwrap()));
            out.push((format!("{name}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().unwrap()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        out
    }

    /// Rebuilds parameters from `(name, shape, data)` triples in [`Self::tensors`] order.
    pub fn from_tensors(config: FieldConfig, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self, FieldError> {
        let mut p = Self::zeros(config);
        let expected: Vec<(String, Vec<usize>)> =
            p.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != tensors.len() {
            return Err(FieldError::Shape(format!("expected {} tensors, got {}", expected.len(), tensors.len())));
        }
        for ((dst, (name, shape)), (got_name, got_shape, data)) in
            p.tensors_mut().into_iter().zip(expected).zip(tensors)
        {
            if &name != got_name || &shape != got_shape || dst.len() != data.len() {
                return Err(FieldError::Shape(format!("tensor {got_name} {got_shape:?} does not match {name} {shape:?}")));
            }
            dst.copy_from_slice(data);
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Reads parameter `index` of the flattened parameter vector.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for (_, _, data) in self.tensors() {
            if index < data.len() {
                return data[index];
            }
            index -= data.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for data in self.tensors_mut() {
            if index < data.len() {
                data[index] = value;
                return;
            }
            index -= data.len();
        }
        panic!("parameter index out of range");
    }

    /// `self += k · other`
    pub fn add_scaled(&mut self, other: &Self, k: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(k, &b.weight);
            a.bias.scaled_add(k, &b.bias);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight *= k;
            l.bias *= k;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.config == other.config
    }
}

pub fn timestep_features(t: f64) -> [f64; TIME_FEATURES] {
    let half = TIME_FEATURES / 2;
    let mut out = [0.0; TIME_FEATURES];
    for k in 0..half {
        let freq = (-TIME_BASE.ln() * k as f64 / half as f64).exp();
        let arg = TIME_SCALE * t * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    out
}

/// Per-frame input rows `[y ‖ style ‖ lyric ‖ time]`.
pub fn input_features(
    config: &FieldConfig,
    t: f64,
    y: ArrayView2<f64>,
    c: &ConditionBundle,
) -> Result<Array2<f64>, FieldError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FieldError::Time(t));
    }
    let (len, d) = y.dim();
    if d != config.latent_dim {
        return Err(FieldError::Shape(format!("latent width {d}, field expects {}", config.latent_dim)));
    }
    if c.style.dim() != config.style_dim {
        return Err(FieldError::Shape(format!("style width {}, field expects {}", c.style.dim(), config.style_dim)));
    }
    if c.lyric_frames.dim() != (len, config.lyric_dim) {
        return Err(FieldError::Shape(format!(
            "lyric frames {:?}, field expects ({len}, {})",
            c.lyric_frames.dim(),
            config.lyric_dim
        )));
    }
    let (s, e) = (config.style_dim, config.lyric_dim);
    let time = timestep_features(t);
    let mut x = Array2::zeros((len, config.input_dim()));
    x.slice_mut(s![.., ..d]).assign(&y);
    x.slice_mut(s![.., d..d + s]).assign(&c.style.view().broadcast((len, s)).unwrap());
    x.slice_mut(s![.., d + s..d + s + e]).assign(&c.lyric_frames);
    for mut row in x.rows_mut() {
        for (k, v) in time.iter().enumerate() {
            row[d + s + e + k] = *v;
        }
    }
    Ok(x)
}

/// Activations kept for the backward pass. `inputs[i]` is the input of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Array2<f64>>,
}

pub fn forward(params: &ModelParams, t: f64, y: ArrayView2<f64>, c: &ConditionBundle) -> Result<Array2<f64>, FieldError> {
    forward_traced(params, t, y, c).map(|(v, _)| v)
}

pub fn forward_traced(
    params: &ModelParams,
    t: f64,
    y: ArrayView2<f64>,
    c: &ConditionBundle,
) -> Result<(Array2<f64>, Trace), FieldError> {
    let x = input_features(&params.config, t, y, c)?;
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    inputs.push(x);
    for layer in &params.layers[..n - 1] {
        let mut h = inputs.last().unwrap().dot(&layer.weight);
        h += &layer.bias;
        h.mapv_inplace(f64::tanh);
        inputs.push(h);
    }
    let last = &params.layers[n - 1];
    let mut out = inputs.last().unwrap().dot(&last.weight);
    out += &last.bias;
    Ok((out, Trace { inputs }))
}

/// Parameter gradient given `dout = ∂loss/∂output` for a traced forward pass.
pub fn backward(params: &ModelParams, trace: &Trace, dout: ArrayView2<f64>) -> ModelParams {
    let mut grads = params.zeros_like();
    accumulate_backward(params, trace, dout, &mut grads);
    grads
}

/// Adds the gradient of a traced forward pass into `grads`.
pub fn accumulate_backward(params: &ModelParams, trace: &Trace, dout: ArrayView2<f64>, grads: &mut ModelParams) {
    let n = params.layers.len();
    let mut g = dout.to_owned();
    for i in (0..n).rev() {
        if i < n - 1 {
            // tanh' = 1 - a^2, with a the output of layer i (input of layer i + 1)
            g.zip_mut_with(&trace.inputs[i + 1], |gv, &a| *gv *= 1.0 - a * a);
        }
        let x = &trace.inputs[i];
        let gl = &mut grads.layers[i];
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &g, 1.0, &mut gl.weight);
        gl.bias += &g.sum_axis(Axis(0));
        if i > 0 {
            g = g.dot(&params.layers[i].weight.t());
        }
    }
}

/// Anything that can be integrated by the sampler or plugged into a loss.
pub trait VelocityField {
    fn velocity(&self, t: f64, y: ArrayView2<f64>, c: &ConditionBundle) -> Result<Array2<f64>, FieldError>;
}

impl VelocityField for ModelParams {
    fn velocity(&self, t: f64, y: ArrayView2<f64>, c: &ConditionBundle) -> Result<Array2<f64>, FieldError> {
        forward(self, t, y, c)
    }
}

/// A batch loss whose value is the mean of per-element losses.
pub trait Objective: Sync {
    fn batch_len(&self) -> usize;

    fn element_loss(&self, params: &ModelParams, index: usize) -> Result<f64, FieldError>;

    fn element_loss_and_grad(&self, params: &ModelParams, index: usize) -> Result<(f64, ModelParams), FieldError>;
}

/// Mean batch loss.
pub fn batch_loss<O: Objective + ?Sized>(params: &ModelParams, obj: &O) -> Result<f64, FieldError> {
    let n = obj.batch_len();
    if n == 0 {
        return Err(FieldError::Shape("empty batch".into()));
    }
    let parts: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| obj.element_loss(params, i))
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    for (index, l) in parts.into_iter().enumerate() {
        if !l.is_finite() {
            return Err(FieldError::NonFinite { index });
        }
        total += l;
    }
    Ok(total / n as f64)
}

/// Mean batch loss and its exact gradient. Elements are evaluated in parallel
/// and reduced in index order.
pub fn loss_and_grad<O: Objective + ?Sized>(params: &ModelParams, obj: &O) -> Result<(f64, ModelParams), FieldError> {
    let n = obj.batch_len();
    if n == 0 {
        return Err(FieldError::Shape("empty batch".into()));
    }
    let parts: Vec<(f64, ModelParams)> = (0..n)
        .into_par_iter()
        .map(|i| obj.element_loss_and_grad(params, i))
        .collect::<Result<_, _>>()?;
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for (index, (l, g)) in parts.into_iter().enumerate() {
        if !l.is_finite() {
            return Err(FieldError::NonFinite { index });
        }
        total += l;
        grads.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / n as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::StyleEmbedding;

    fn tiny_config() -> FieldConfig {
        FieldConfig { latent_dim: 2, style_dim: 3, lyric_dim: 2, hidden: 3, layers: 1 }
    }

    fn bundle(len: usize, cfg: &FieldConfig, seed: u64) -> ConditionBundle {
        let mut rng = rng_for(seed, 99, 0);
        let mut c = ConditionBundle::null(len, cfg.style_dim, cfg.lyric_dim);
        c.style = StyleEmbedding::zeros(cfg.style_dim);
        c.lyric_frames.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        c
    }

    fn randomize(p: &mut ModelParams, seed: u64) {
        let mut rng = rng_for(seed, 98, 0);
        for t in p.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.8..0.8));
        }
    }

    fn latent(len: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_for(seed, 97, 0);
        Array2::from_shape_fn((len, d), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn zero_output_projection_gives_zero_field() {
        let cfg = FieldConfig::default();
        let p = ModelParams::init(cfg, 3);
        let y = latent(16, 2, 1);
        let v = forward(&p, 0.37, y.view(), &bundle(16, &cfg, 2)).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let mut p = ModelParams::init(cfg, 3);
        randomize(&mut p, 4);
        let y = latent(5, 2, 1);
        let c = bundle(5, &cfg, 2);
        let a = forward(&p, 0.5, y.view(), &c).unwrap();
        let b = forward(&p, 0.5, y.view(), &c).unwrap();
        assert_eq!(a, b);
    }

    /// Independent scalar-loop evaluation of the same network.
    fn reference_forward(p: &ModelParams, t: f64, y: &Array2<f64>, c: &ConditionBundle) -> Vec<Vec<f64>> {
        let time = timestep_features(t);
        let mut out = Vec::new();
        for f in 0..y.nrows() {
            let mut x: Vec<f64> = y.row(f).to_vec();
            x.extend(c.style.view().iter());
            x.extend(c.lyric_frames.row(f).iter());
            x.extend(time.iter());
            let n = p.layers().len();
            for (li, layer) in p.layers().iter().enumerate() {
                let mut h = vec![0.0; layer.bias.len()];
                for (o, ho) in h.iter_mut().enumerate() {
                    let mut acc = layer.bias[o];
                    for (i, xi) in x.iter().enumerate() {
                        acc += xi * layer.weight[[i, o]];
                    }
                    *ho = if li + 1 < n { acc.tanh() } else { acc };
                }
                x = h;
            }
            out.push(x);
        }
        out
    }

    #[test]
    fn forward_matches_scalar_reference() {
        let cfg = tiny_config();
        let mut p = ModelParams::init(cfg, 1);
        randomize(&mut p, 7);
        let y = latent(4, 2, 8);
        let mut c = bundle(4, &cfg, 9);
        c.style = StyleEmbedding::zeros(3);
        let v = forward(&p, 0.25, y.view(), &c).unwrap();
        let r = reference_forward(&p, 0.25, &y, &c);
        for (f, row) in r.iter().enumerate() {
            for (d, want) in row.iter().enumerate() {
                assert!((v[[f, d]] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn timestep_features_at_zero() {
        let f = timestep_features(0.0);
        assert_eq!(f, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn shape_and_time_errors() {
        let cfg = tiny_config();
        let p = ModelParams::init(cfg, 1);
        let c = bundle(4, &cfg, 1);
        assert!(matches!(forward(&p, 0.5, latent(4, 3, 1).view(), &c), Err(FieldError::Shape(_))));
        assert!(matches!(forward(&p, 0.5, latent(5, 2, 1).view(), &c), Err(FieldError::Shape(_))));
        assert!(matches!(forward(&p, 1.5, latent(4, 2, 1).view(), &c), Err(FieldError::Time(_))));
    }

    /// 0.5 · Σ (v - target)^2 over one sequence.
    struct HalfSquare {
        y: Array2<f64>,
        target: Array2<f64>,
        c: ConditionBundle,
        t: f64,
    }

    impl Objective for HalfSquare {
        fn batch_len(&self) -> usize {
            1
        }
        fn element_loss(&self, p: &ModelParams, _: usize) -> Result<f64, FieldError> {
            let v = forward(p, self.t, self.y.view(), &self.c)?;
            Ok(0.5 * (&v - &self.target).mapv(|r| r * r).sum())
        }
        fn element_loss_and_grad(&self, p: &ModelParams, _: usize) -> Result<(f64, ModelParams), FieldError> {
            let (v, trace) = forward_traced(p, self.t, self.y.view(), &self.c)?;
            let r = &v - &self.target;
            Ok((0.5 * r.mapv(|x| x * x).sum(), backward(p, &trace, r.view())))
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = FieldConfig { latent_dim: 2, style_dim: 3, lyric_dim: 2, hidden: 5, layers: 2 };
        let mut p = ModelParams::init(cfg, 1);
        randomize(&mut p, 2);
        let obj = HalfSquare { y: latent(6, 2, 3), target: latent(6, 2, 4), c: bundle(6, &cfg, 5), t: 0.3 };
        let (_, g) = loss_and_grad(&p, &obj).unwrap();
        let h = 1e-6;
        for i in 0..p.num_params() {
            let orig = p.get_flat(i);
            p.set_flat(i, orig + h);
            let up = batch_loss(&p, &obj).unwrap();
            p.set_flat(i, orig - h);
            let down = batch_loss(&p, &obj).unwrap();
            p.set_flat(i, orig);
            let fd = (up - down) / (2.0 * h);
            let an = g.get_flat(i);
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn zero_loss_has_zero_gradient() {
        let cfg = tiny_config();
        let mut p = ModelParams::init(cfg, 1);
        randomize(&mut p, 2);
        let y = latent(4, 2, 3);
        let c = bundle(4, &cfg, 5);
        let target = forward(&p, 0.6, y.view(), &c).unwrap();
        let obj = HalfSquare { y, target, c, t: 0.6 };
        let (l, g) = loss_and_grad(&p, &obj).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.tensors().iter().all(|(_, _, d)| d.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tensor_round_trip() {
        let cfg = tiny_config();
        let mut p = ModelParams::init(cfg, 1);
        randomize(&mut p, 2);
        let ts: Vec<_> = p.tensors().into_iter().map(|(n, s, d)| (n, s, d.to_vec())).collect();
        assert_eq!(ts[0].0, "input.weight");
        assert_eq!(ts.last().unwrap().0, "output.bias");
        assert_eq!(ModelParams::from_tensors(cfg, &ts).unwrap(), p);
        let mut bad = ts.clone();
        bad[0].1 = vec![1, 1];
        assert!(ModelParams::from_tensors(cfg, &bad).is_err());
    }
}
