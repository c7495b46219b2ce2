//! Euler ODE sampling under classifier-free guidance.

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::ConditionBundle;
use crate::field::{FieldError, VelocityField};
use crate::rng::{derive_seed, stream};
use crate::synth::{DataError, LatentSeq};

pub const DEFAULT_STEPS: usize = 32;
pub const DEFAULT_CFG_SCALE: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("non-finite state after Euler step {step}")]
    NonFinite { step: usize },
    #[error("steps must be at least 1")]
    NoSteps,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub use_ema: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, cfg_scale: DEFAULT_CFG_SCALE, seed: 0, use_ema: false }
    }
}

/// `v_u + s·(v_c − v_u)`, evaluated as `s·v_c + (1 − s)·v_u` so that `s = 0`
/// and `s = 1` return the unconditional and conditional fields bit for bit.
pub fn cfg_velocity(v_cond: ArrayView2<f64>, v_uncond: ArrayView2<f64>, scale: f64) -> Result<Array2<f64>, FieldError> {
    if v_cond.dim() != v_uncond.dim() {
        return Err(FieldError::Shape(format!("{:?} vs {:?}", v_cond.dim(), v_uncond.dim())));
    }
    let mut out = Array2::zeros(v_cond.dim());
    Zip::from(&mut out)
        .and(&v_cond)
        .and(&v_uncond)
        .for_each(|o, &c, &u| *o = scale * c + (1.0 - scale) * u);
    Ok(out)
}

pub fn initial_noise(len: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((len, dim), || rng.sample(StandardNormal))
}

/// Explicit Euler from `t = 0` to `t = 1` on the left-endpoint grid
/// `t_k = k / steps`.
pub fn euler_integrate<V>(y0: Array2<f64>, steps: usize, mut velocity: V) -> Result<Array2<f64>, SampleError>
where
    V: FnMut(f64, ArrayView2<f64>) -> Result<Array2<f64>, FieldError>,
{
    if steps == 0 {
        return Err(SampleError::NoSteps);
    }
    let dt = 1.0 / steps as f64;
    let mut y = y0;
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = velocity(t, y.view())?;
        if v.dim() != y.dim() {
            return Err(FieldError::Shape(format!("velocity {:?} vs state {:?}", v.dim(), y.dim())).into());
        }
        y.scaled_add(dt, &v);
        if y.iter().any(|x| !x.is_finite()) {
            return Err(SampleError::NonFinite { step: k });
        }
    }
    Ok(y)
}

/// Draws one latent for condition `c`. The unconditional branch uses the
/// null bundle, the same representation condition dropout produces.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    c: &ConditionBundle,
    cfg: &SampleConfig,
    latent_dim: usize,
    frame_rate: f64,
) -> Result<LatentSeq, SampleError> {
    let null = c.null_like();
    let y0 = initial_noise(c.len(), latent_dim, cfg.seed);
    let y = euler_integrate(y0, cfg.steps, |t, y| {
        let v_cond = field.velocity(t, y, c)?;
        let v_uncond = field.velocity(t, y, &null)?;
        cfg_velocity(v_cond.view(), v_uncond.view(), cfg.cfg_scale)
    })?;
    Ok(LatentSeq::new(y, frame_rate)?)
}

/// Samples one latent per bundle in parallel; sample `i` is seeded with
/// `derive(cfg.seed, i)`.
pub fn sample_many<F: VelocityField + Sync + ?Sized>(
    field: &F,
    bundles: &[ConditionBundle],
    cfg: &SampleConfig,
    latent_dim: usize,
    frame_rate: f64,
) -> Result<Vec<LatentSeq>, SampleError> {
    bundles
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let per = SampleConfig { seed: derive_seed(cfg.seed, stream::SAMPLE, i as u64), ..*cfg };
            euler_sample(field, c, &per, latent_dim, frame_rate)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, ModelParams};
    use ndarray::array;

    struct Constant(f64);

    impl VelocityField for Constant {
        fn velocity(&self, _: f64, y: ArrayView2<f64>, _: &ConditionBundle) -> Result<Array2<f64>, FieldError> {
            Ok(Array2::from_elem(y.dim(), self.0))
        }
    }

    struct Identity;

    impl VelocityField for Identity {
        fn velocity(&self, _: f64, y: ArrayView2<f64>, _: &ConditionBundle) -> Result<Array2<f64>, FieldError> {
            Ok(y.to_owned())
        }
    }

    fn bundle() -> ConditionBundle {
        let mut c = ConditionBundle::null(16, 8, 8);
        c.lyric_frames.fill(0.3);
        c.lyrics_dropped = false;
        c
    }

    #[test]
    fn cfg_formula() {
        let c = array![[2.0, -1.0]];
        let u = array![[1.0, 0.5]];
        assert_eq!(cfg_velocity(c.view(), u.view(), 0.0).unwrap(), u);
        assert_eq!(cfg_velocity(c.view(), u.view(), 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(array![[2.0]].view(), array![[1.0]].view(), 4.0).unwrap()[[0, 0]], 5.0);
        assert!(cfg_velocity(c.view(), array![[1.0]].view(), 1.0).is_err());
    }

    #[test]
    fn constant_field_integrates_exactly() {
        for steps in [1, 7, 32] {
            let cfg = SampleConfig { steps, seed: 3, ..Default::default() };
            let out = euler_sample(&Constant(0.75), &bundle(), &cfg, 2, 10.0).unwrap();
            let y0 = initial_noise(16, 2, 3);
            for (o, y) in out.frames().iter().zip(y0.iter()) {
                assert!((o - (y + 0.75)).abs() <= 1e-12);
            }
        }
        let out = euler_sample(&Constant(0.0), &bundle(), &SampleConfig::default(), 2, 10.0).unwrap();
        assert_eq!(out.frames(), initial_noise(16, 2, 0));
    }

    #[test]
    fn linear_field_matches_recurrence() {
        let cfg = SampleConfig { steps: 32, seed: 5, ..Default::default() };
        let out = euler_sample(&Identity, &bundle(), &cfg, 2, 10.0).unwrap();
        let factor = (1.0 + 1.0 / 32.0f64).powi(32);
        for (o, y) in out.frames().iter().zip(initial_noise(16, 2, 5).iter()) {
            assert!((o - factor * y).abs() <= 1e-12);
        }
    }

    #[test]
    fn refinement_error_shrinks_with_steps() {
        let y0 = array![[1.0]];
        let exact = std::f64::consts::E;
        let errs: Vec<f64> = [32, 64, 128, 256]
            .iter()
            .map(|&n| (euler_integrate(y0.clone(), n, |_, y| Ok(y.to_owned())).unwrap()[[0, 0]] - exact).abs())
            .collect();
        for w in errs.windows(2) {
            assert!(w[0] / w[1] >= 1.5, "{errs:?}");
        }
    }

    #[test]
    fn zero_scale_equals_null_condition_sampling() {
        let mut p = ModelParams::init(FieldConfig::default(), 1);
        p.layers_mut().last_mut().unwrap().weight.fill(0.2);
        let c = bundle();
        let cfg0 = SampleConfig { cfg_scale: 0.0, seed: 9, ..Default::default() };
        let a = euler_sample(&p, &c, &cfg0, 2, 10.0).unwrap();
        let b = euler_sample(&p, &c.null_like(), &cfg0, 2, 10.0).unwrap();
        assert_eq!(a, b);
        let again = euler_sample(&p, &c, &cfg0, 2, 10.0).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = SampleConfig { steps: 0, ..Default::default() };
        assert!(matches!(euler_sample(&Identity, &bundle(), &cfg, 2, 10.0), Err(SampleError::NoSteps)));
    }

    #[test]
    fn divergence_reports_step() {
        struct Explode;
        impl VelocityField for Explode {
            fn velocity(&self, _: f64, y: ArrayView2<f64>, _: &ConditionBundle) -> Result<Array2<f64>, FieldError> {
                Ok(y.mapv(|v| v * 1e300))
            }
        }
        let err = euler_sample(&Explode, &bundle(), &SampleConfig { seed: 1, ..Default::default() }, 2, 10.0).unwrap_err();
        assert!(matches!(err, SampleError::NonFinite { .. }));
    }
}
