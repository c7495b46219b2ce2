//! Distribution metrics and timing.
//!
//! The Fréchet distance compares Gaussian fits of per-sample embeddings; the
//! KL divergence compares categorical histograms over a grid. Embeddings come
//! from an [`Embedder`]; the default is the mean frame of each sequence.

use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::LatentSeq;

/// Additive floor applied to `q` before the KL log-ratio.
pub const KL_EPS: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("no samples to featurize")]
    Empty,
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Gaussian moments of an embedding set (population covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianFit {
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self, MetricError> {
        let first = points.first().ok_or(MetricError::Empty)?;
        let m = first.len();
        let n = points.len();
        let mut mean = DVector::zeros(m);
        for p in points {
            if p.len() != m {
                return Err(MetricError::Dimension(m, p.len()));
            }
            mean += DVector::from_column_slice(p);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(m, m);
        for p in points {
            let d = DVector::from_column_slice(p) - &mean;
            cov += &d * d.transpose();
        }
        cov /= n as f64;
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Probability vector over `B` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, MetricError> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(MetricError::Invalid("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MetricError::Invalid(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    fn from_counts(counts: &[usize]) -> Self {
        let n: usize = counts.iter().sum();
        Self { probs: counts.iter().map(|&c| c as f64 / n as f64).collect() }
    }
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues are
/// clamped to zero.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::Dimension(a.dim(), b.dim()));
    }
    let diff = &a.mean - &b.mean;
    let root_a = sqrtm_psd(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let cross = sqrtm_psd(&inner);
    let value = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// `Σ p_i ln(p_i / q_i)` with `q_i` floored at [`KL_EPS`]; zero-mass terms of
/// `p` contribute nothing.
pub fn kl_divergence(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64, MetricError> {
    if p.probs.len() != q.probs.len() {
        return Err(MetricError::Dimension(p.probs.len(), q.probs.len()));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_EPS)).ln())
        .sum())
}

/// Maps a latent sequence to a fixed-width embedding.
pub trait Embedder {
    fn embed(&self, x: &LatentSeq) -> Vec<f64>;
}

/// Average frame of the sequence.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanFrame;

impl Embedder for MeanFrame {
    fn embed(&self, x: &LatentSeq) -> Vec<f64> {
        x.mean_frame().to_vec()
    }
}

/// A regular grid of `bins` cells per axis over `[lo, hi)`; points outside
/// are clamped into the edge cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl BinGrid {
    pub fn cell(&self, point: &[f64]) -> usize {
        let width = (self.hi - self.lo) / self.bins as f64;
        point.iter().fold(0usize, |acc, &x| {
            let k = ((x - self.lo) / width).floor();
            let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(self.bins - 1) };
            acc * self.bins + k
        })
    }

    pub fn cells(&self, dim: usize) -> usize {
        self.bins.pow(dim as u32)
    }
}

impl Default for BinGrid {
    fn default() -> Self {
        Self { lo: -1.0, hi: 5.0, bins: 12 }
    }
}

pub fn featurize_with<E: Embedder>(
    embedder: &E,
    samples: &[LatentSeq],
    grid: &BinGrid,
) -> Result<(GaussianFit, CategoricalDist), MetricError> {
    if samples.is_empty() {
        return Err(MetricError::Empty);
    }
    if grid.bins == 0 || !(grid.hi > grid.lo) {
        return Err(MetricError::Invalid("grid needs bins > 0 and hi > lo".into()));
    }
    let points: Vec<Vec<f64>> = samples.iter().map(|s| embedder.embed(s)).collect();
    let fit = GaussianFit::from_points(&points)?;
    let mut counts = vec![0usize; grid.cells(fit.dim())];
    for p in &points {
        counts[grid.cell(p)] += 1;
    }
    Ok((fit, CategoricalDist::from_counts(&counts)))
}

/// Gaussian fit and grid histogram of the mean frames.
pub fn featurize(samples: &[LatentSeq], grid: &BinGrid) -> Result<(GaussianFit, CategoricalDist), MetricError> {
    featurize_with(&MeanFrame, samples, grid)
}

/// Real-time factor: wall-clock seconds per second of generated material.
/// Fraction of samples whose mean frame lies nearest to `means[mode]`
/// (ties go to the lower mode index).
pub fn mode_fraction(samples: &[LatentSeq], means: &[Vec<f64>], mode: usize) -> Result<f64, MetricError> {
    if samples.is_empty() || means.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut hits = 0usize;
    for x in samples {
        let m = x.mean_frame();
        if m.len() != means[0].len() {
            return Err(MetricError::Dimension(m.len(), means[0].len()));
        }
        let d2 = |c: &Vec<f64>| m.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let nearest = (0..means.len()).fold(0, |best, k| if d2(&means[k]) < d2(&means[best]) { k } else { best });
        hits += usize::from(nearest == mode);
    }
    Ok(hits as f64 / samples.len() as f64)
}

pub fn rtf(elapsed_seconds: f64, frames: usize, frame_rate: f64) -> Result<f64, MetricError> {
    if frames == 0 {
        return Err(MetricError::Invalid("zero frames".into()));
    }
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(MetricError::Invalid(format!("frame rate {frame_rate}")));
    }
    if !(elapsed_seconds >= 0.0) {
        return Err(MetricError::Invalid(format!("elapsed {elapsed_seconds}")));
    }
    Ok(elapsed_seconds / (frames as f64 / frame_rate))
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl MetricRecord {
    pub fn new(metric: impl Into<String>, value: f64, n: usize) -> Self {
        Self { metric: metric.into(), value, n }
    }
}

/// Appends one JSON object per record to `path`.
pub fn append_report(path: &Path, records: &[MetricRecord]) -> io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r).map_err(io::Error::other)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn fit1(mu: f64, var: f64) -> GaussianFit {
        GaussianFit { mean: DVector::from_element(1, mu), cov: DMatrix::from_element(1, 1, var), n: 1 }
    }

    #[test]
    fn mode_fraction_counts_nearest_mean() {
        let at = |x: f64| LatentSeq::new(ndarray::Array2::from_elem((4, 2), x), 10.0).unwrap();
        let means = vec![vec![3.0, 3.0], vec![1.0, 1.0]];
        let xs = vec![at(3.2), at(2.5), at(1.9), at(0.0), at(2.0)];
        // 2.0 is equidistant and goes to mode 0
        assert_eq!(mode_fraction(&xs, &means, 0).unwrap(), 3.0 / 5.0);
        assert_eq!(mode_fraction(&xs, &means, 1).unwrap(), 2.0 / 5.0);
        assert!(mode_fraction(&[], &means, 0).is_err());
    }

    #[test]
    fn identical_fits_have_zero_distance() {
        let a = GaussianFit {
            mean: DVector::from_vec(vec![1.0, -2.0]),
            cov: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]),
            n: 10,
        };
        assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn scalar_mean_shift() {
        assert!((frechet_distance(&fit1(0.0, 0.7), &fit1(1.0, 0.7)).unwrap() - 1.0).abs() <= 1e-12);
        // (μ1 − μ2)² + (σ1 − σ2)²
        let d = frechet_distance(&fit1(0.5, 4.0), &fit1(-1.0, 1.0)).unwrap();
        assert!((d - (2.25 + 1.0)).abs() <= 1e-12);
    }

    #[test]
    fn diagonal_case_is_coordinatewise() {
        let a = GaussianFit {
            mean: DVector::from_vec(vec![0.3, -1.2]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0])),
            n: 1,
        };
        let b = GaussianFit {
            mean: DVector::from_vec(vec![1.1, 0.4]),
            cov: DMatrix::from_diagonal(&DVector::from_vec(vec![1.7, 0.2])),
            n: 1,
        };
        let want: f64 = [(0.3f64, 1.1f64, 0.5f64, 1.7f64), (-1.2, 0.4, 2.0, 0.2)]
            .iter()
            .map(|&(m1, m2, v1, v2)| (m1 - m2).powi(2) + (v1.sqrt() - v2.sqrt()).powi(2))
            .sum();
        assert!((frechet_distance(&a, &b).unwrap() - want).abs() <= 1e-10);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let b = GaussianFit { mean: DVector::zeros(2), cov: DMatrix::zeros(2, 2), n: 1 };
        assert!(frechet_distance(&fit1(0.0, 1.0), &b).is_err());
    }

    #[test]
    fn kl_golden_values() {
        let p = CategoricalDist::new(vec![1.0, 0.0]).unwrap();
        let q = CategoricalDist::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - std::f64::consts::LN_2).abs() <= 1e-12);
        assert_eq!(kl_divergence(&q, &q).unwrap(), 0.0);
        assert!(kl_divergence(&p, &CategoricalDist::new(vec![1.0]).unwrap()).is_err());
    }

    fn random_dist(rng: &mut ChaCha8Rng, b: usize) -> CategoricalDist {
        let raw: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        CategoricalDist { probs: raw.iter().map(|v| v / total).collect() }
    }

    #[test]
    fn kl_matches_term_by_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_dist(&mut rng, 16);
            let q = random_dist(&mut rng, 16);
            let mut want = 0.0;
            for i in 0..16 {
                want += p.probs[i] * (p.probs[i].ln() - q.probs[i].ln());
            }
            assert!((kl_divergence(&p, &q).unwrap() - want).abs() <= 1e-12);
        }
    }

    fn seq(rows: &[[f64; 2]]) -> LatentSeq {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        LatentSeq::new(Array2::from_shape_vec((rows.len(), 2), flat).unwrap(), 10.0).unwrap()
    }

    #[test]
    fn identical_samples_featurize_to_point_mass() {
        let s = vec![seq(&[[1.0, 2.0], [3.0, 2.0]]); 5];
        let (fit, hist) = featurize(&s, &BinGrid::default()).unwrap();
        assert!(fit.cov.iter().all(|&v| v == 0.0));
        assert_eq!(fit.mean.as_slice(), &[2.0, 2.0]);
        assert_eq!(hist.probs.iter().filter(|&&p| p == 1.0).count(), 1);
        assert!(featurize(&[], &BinGrid::default()).is_err());
    }

    #[test]
    fn two_point_moments() {
        let s = vec![seq(&[[1.0, 0.0]]), seq(&[[-1.0, 0.0]])];
        let (fit, _) = featurize(&s, &BinGrid::default()).unwrap();
        assert_eq!(fit.mean.as_slice(), &[0.0, 0.0]);
        assert_eq!(fit.cov, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn standard_normal_fit_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s: Vec<LatentSeq> = (0..10_000)
            .map(|_| seq(&[[rng.sample(StandardNormal), rng.sample(StandardNormal)]]))
            .collect();
        let (fit, _) = featurize(&s, &BinGrid::default()).unwrap();
        assert!(fit.mean.iter().all(|m| m.abs() < 0.05), "{}", fit.mean);
    }

    #[test]
    fn out_of_grid_points_clamp_to_edges() {
        let g = BinGrid { lo: 0.0, hi: 4.0, bins: 4 };
        assert_eq!(g.cell(&[-10.0, 100.0]), 3);
        assert_eq!(g.cell(&[3.9, 0.1]), 12);
        assert_eq!(g.cells(2), 16);
    }

    #[test]
    fn rtf_definition() {
        assert!((rtf(1.0, 100, 10.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(rtf(10.0, 100, 10.0).unwrap(), 1.0);
        assert!(rtf(1.0, 0, 10.0).is_err());
        assert!(rtf(1.0, 10, 0.0).is_err());
    }

    #[test]
    fn report_lines_are_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.jsonl");
        append_report(&path, &[MetricRecord::new("fad", 0.5, 10)]).unwrap();
        append_report(&path, &[MetricRecord::new("kl", 0.1, 10)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<MetricRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].metric, "fad");
        assert!(text.contains("\"metric\":\"kl\""));
    }

    proptest! {
        #[test]
        fn frechet_is_symmetric(
            m in proptest::collection::vec(-3.0f64..3.0, 6),
            l in proptest::collection::vec(-1.5f64..1.5, 12),
        ) {
            let mk = |mean: &[f64], f: &[f64]| {
                let a = DMatrix::from_row_slice(3, 2, f);
                GaussianFit { mean: DVector::from_column_slice(mean), cov: &a * a.transpose(), n: 1 }
            };
            // rank-2 covariances in 3 dimensions exercise the eigenvalue clamp;
            // near-zero eigenvalues carry √ε-sized noise through the root
            let a = mk(&m[..3], &l[..6]);
            let b = mk(&m[3..], &l[6..]);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
            prop_assert!(ab >= 0.0);
            prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
            let ridge = DMatrix::<f64>::identity(3, 3) * 0.05;
            let fa = GaussianFit { cov: &a.cov + &ridge, ..a };
            let fb = GaussianFit { cov: &b.cov + &ridge, ..b };
            let ab = frechet_distance(&fa, &fb).unwrap();
            let ba = frechet_distance(&fb, &fa).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        }

        #[test]
        fn kl_is_non_negative(seed in any::<u64>(), b in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_dist(&mut rng, b);
            let q = random_dist(&mut rng, b);
            prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn featurize_is_permutation_invariant(pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 2..20)) {
            let s: Vec<LatentSeq> = pts.iter().map(|&(a, b)| seq(&[[a, b]])).collect();
            let mut r = s.clone();
            r.reverse();
            let (fa, ha) = featurize(&s, &BinGrid::default()).unwrap();
            let (fb, hb) = featurize(&r, &BinGrid::default()).unwrap();
            prop_assert_eq!(ha, hb);
            prop_assert!((fa.mean - fb.mean).norm() < 1e-12);
            prop_assert!((fa.cov - fb.cov).norm() < 1e-12);
        }
    }
}
