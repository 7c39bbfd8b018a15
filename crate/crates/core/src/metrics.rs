//! Evaluation suite: Fréchet distance between Gaussian feature fits,
//! coefficient of determination (plain and binarized on contact masks), and
//! macro F1 for the downstream classifier.
//!
//! Fréchet features come from one of two spaces: `codec-latent`
//! (pre-quantization encoder vectors, the default) or `pca-flat` (flattened
//! frames projected onto principal components fit on the real set). Absolute
//! values are only comparable within one feature space, so every report
//! records which space produced it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecCheckpoint, CodecError};
use crate::data::PressureSequence;

/// Default contact threshold on normalized cells (100 mmHg raw).
pub const DEFAULT_CONTACT_TAU: f64 = 0.02;

/// Eigenvalues above this (negative) floor are treated as rounding noise.
const EIGEN_CLAMP: f64 = -1e-8;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not PSD within tolerance: eigenvalue {0}")]
    NotPsd(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("label {0} is not in the class list")]
    UnknownLabel(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mu: Array1<f64>,
    /// Symmetrized by `(S + S^T) / 2` at construction.
    pub sigma: Array2<f64>,
    pub n: usize,
}

/// Fit mean and unbiased covariance to rows of `features`.
pub fn gaussian_stats(features: &Array2<f64>) -> Result<GaussianStats, MetricsError> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(MetricsError::TooFewSamples { need: 2, got: n });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::InvalidParameter("non-finite feature value".into()));
    }
    let mu = features.sum_axis(ndarray::Axis(0)) / n as f64;
    let mut sigma = Array2::<f64>::zeros((d, d));
    for row in features.rows() {
        let centered = &row - &mu;
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                sigma[[i, j]] += ci * centered[j];
            }
        }
    }
    sigma /= (n - 1) as f64;
    for i in 0..d {
        for j in 0..i {
            sigma[[i, j]] = sigma[[j, i]];
        }
    }
    Ok(GaussianStats { mu, sigma, n })
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Symmetric PSD square root via eigendecomposition, clamping rounding-noise
/// negatives and rejecting anything clearly indefinite.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut values = eig.eigenvalues.clone();
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < EIGEN_CLAMP {
                return Err(MetricsError::NotPsd(*v));
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&values) * q.transpose())
}

/// Fréchet distance between two Gaussian fits:
/// `||mu_a - mu_b||^2 + tr(sigma_a + sigma_b - 2 (sigma_a sigma_b)^(1/2))`.
///
/// The square-root trace is computed from the symmetrized product
/// `A sigma_b A` with `A = sigma_a^(1/2)`, which shares its spectrum with
/// `sigma_a sigma_b` but stays symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricsError> {
    if a.mu.len() != b.mu.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "stats are {}-d and {}-d",
            a.mu.len(),
            b.mu.len()
        )));
    }
    let mean_term: f64 = a
        .mu
        .iter()
        .zip(b.mu.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let sa = to_nalgebra(&a.sigma);
    let sb = to_nalgebra(&b.sigma);
    let root_a = sqrt_psd(&sa)?;
    let product = &root_a * &sb * &root_a;
    let sym = (&product + product.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut sqrt_trace = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v < 0.0 {
            if v < EIGEN_CLAMP {
                return Err(MetricsError::NotPsd(v));
            }
            continue;
        }
        sqrt_trace += v.sqrt();
    }
    let result = mean_term + sa.trace() + sb.trace() - 2.0 * sqrt_trace;
    if result < -1e-6 {
        return Err(MetricsError::NotPsd(result));
    }
    Ok(result.max(0.0))
}

// ---------------------------------------------------------------------------
// Feature spaces and FID
// ---------------------------------------------------------------------------

/// Where FID features come from.
pub enum FeatureSpace<'a> {
    /// Pre-quantization encoder vectors of a frozen codec (the default).
    CodecLatent(&'a CodecCheckpoint),
    /// Flattened frames projected to principal components fit on the real
    /// set.
    PcaFlat { components: usize },
}

impl FeatureSpace<'_> {
    pub fn id(&self) -> String {
        match self {
            FeatureSpace::CodecLatent(_) => "codec-latent".into(),
            FeatureSpace::PcaFlat { components } => format!("pca-flat-{components}"),
        }
    }
}

/// Linear projection onto the top principal components of a reference set.
pub struct Pca {
    mean: Array1<f64>,
    /// One component per row, `(k, d)`.
    components: Array2<f64>,
}

/// Fit `k` principal components to rows of `data` (covariance
/// eigendecomposition; components ordered by descending eigenvalue).
pub fn fit_pca(data: &Array2<f64>, k: usize) -> Result<Pca, MetricsError> {
    let (n, d) = data.dim();
    if n < 2 {
        return Err(MetricsError::TooFewSamples { need: 2, got: n });
    }
    let k = k.min(d);
    if k == 0 {
        return Err(MetricsError::InvalidParameter("need at least 1 component".into()));
    }
    let stats = gaussian_stats(data)?;
    let eig = SymmetricEigen::new(to_nalgebra(&stats.sigma));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut components = Array2::zeros((k, d));
    for (row, &idx) in order[..k].iter().enumerate() {
        for col in 0..d {
            components[[row, col]] = eig.eigenvectors[(col, idx)];
        }
    }
    Ok(Pca { mean: stats.mu, components })
}

impl Pca {
    pub fn project(&self, data: &Array2<f64>) -> Array2<f64> {
        let centered = data - &self.mean.view().insert_axis(ndarray::Axis(0));
        centered.dot(&self.components.t())
    }
}

fn flatten_frames(seqs: &[PressureSequence]) -> Array2<f64> {
    let d = seqs[0].height() * seqs[0].width();
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    let mut out = Array2::zeros((total, d));
    let mut row = 0;
    for s in seqs {
        for f in &s.frames {
            for (i, &v) in f.grid().iter().enumerate() {
                out[[row, i]] = v as f64;
            }
            row += 1;
        }
    }
    out
}

fn latent_features(
    codec: &CodecCheckpoint,
    seqs: &[PressureSequence],
) -> Result<Array2<f64>, MetricsError> {
    let mut rows: Vec<Array2<f64>> = Vec::with_capacity(seqs.len());
    for s in seqs {
        rows.push(codec.encode(s)?.vectors);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| MetricsError::DimensionMismatch(e.to_string()))
}

/// Fréchet distance between Gaussian fits of real and generated features.
pub fn fid(
    real: &[PressureSequence],
    generated: &[PressureSequence],
    space: &FeatureSpace,
) -> Result<f64, MetricsError> {
    if real.is_empty() || generated.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (real_feats, gen_feats) = match space {
        FeatureSpace::CodecLatent(codec) => {
            (latent_features(codec, real)?, latent_features(codec, generated)?)
        }
        FeatureSpace::PcaFlat { components } => {
            let real_flat = flatten_frames(real);
            let pca = fit_pca(&real_flat, *components)?;
            (pca.project(&real_flat), pca.project(&flatten_frames(generated)))
        }
    };
    let d = real_feats.ncols();
    for (name, feats) in [("real", &real_feats), ("generated", &gen_feats)] {
        if feats.nrows() < d + 1 {
            log::warn!(
                "{name} set has {} feature samples for {d} dimensions; covariance may be ill-conditioned",
                feats.nrows()
            );
        }
    }
    let a = gaussian_stats(&real_feats)?;
    let b = gaussian_stats(&gen_feats)?;
    frechet_distance(&a, &b)
}

// ---------------------------------------------------------------------------
// R-squared
// ---------------------------------------------------------------------------

fn check_paired(pred: &[PressureSequence], target: &[PressureSequence]) -> Result<(), MetricsError> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} predicted vs {} target sequences",
            pred.len(),
            target.len()
        )));
    }
    for (p, t) in pred.iter().zip(target.iter()) {
        if p.len() != t.len() || p.height() != t.height() || p.width() != t.width() {
            return Err(MetricsError::DimensionMismatch(format!(
                "sequence {} shapes differ: {}x{}x{} vs {}x{}x{}",
                t.activity_id,
                p.len(),
                p.height(),
                p.width(),
                t.len(),
                t.height(),
                t.width()
            )));
        }
    }
    Ok(())
}

fn r2_over_cells<F: Fn(f64) -> f64>(
    pred: &[PressureSequence],
    target: &[PressureSequence],
    map: F,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in target {
        for f in &t.frames {
            for &v in f.grid().iter() {
                sum += map(v as f64);
                count += 1;
            }
        }
    }
    let mean = sum / count as f64;

    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        for (fp, ft) in p.frames.iter().zip(t.frames.iter()) {
            for (&vp, &vt) in fp.grid().iter().zip(ft.grid().iter()) {
                let yp = map(vp as f64);
                let yt = map(vt as f64);
                ss_res += (yt - yp) * (yt - yp);
                ss_tot += (yt - mean) * (yt - mean);
            }
        }
    }
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - ss_res / ss_tot
}

/// Coefficient of determination over all cells of all paired frames, with
/// the total sum of squares taken against the global target mean.
///
/// Degenerate cases: a constant target predicted exactly gives `1.0`; a
/// constant target predicted wrongly gives `-inf` (worse than any finite
/// predictor).
pub fn r2(pred: &[PressureSequence], target: &[PressureSequence]) -> Result<f64, MetricsError> {
    check_paired(pred, target)?;
    Ok(r2_over_cells(pred, target, |v| v))
}

/// R-squared on binarized contact masks: cells above `tau` count as contact.
pub fn binarized_r2(
    pred: &[PressureSequence],
    target: &[PressureSequence],
    tau: f64,
) -> Result<f64, MetricsError> {
    check_paired(pred, target)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(MetricsError::InvalidParameter(format!(
            "tau must be in (0, 1) on normalized data, got {tau}"
        )));
    }
    Ok(r2_over_cells(pred, target, |v| if v > tau { 1.0 } else { 0.0 }))
}

// ---------------------------------------------------------------------------
// Macro F1
// ---------------------------------------------------------------------------

/// Macro F1 plus its per-class breakdown.
#[derive(Debug, Clone)]
pub struct MacroF1<T> {
    pub macro_f1: f64,
    pub per_class: Vec<(T, f64)>,
    /// Classes absent from both predictions and truth; they contribute
    /// `F1 = 1` by convention.
    pub absent: Vec<T>,
}

/// Unweighted mean of per-class F1 scores over `classes`.
pub fn macro_f1<T: PartialEq + Clone + std::fmt::Debug>(
    predicted: &[T],
    truth: &[T],
    classes: &[T],
) -> Result<MacroF1<T>, MetricsError> {
    if predicted.is_empty() || truth.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if predicted.len() != truth.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    for l in predicted.iter().chain(truth.iter()) {
        if !classes.contains(l) {
            return Err(MetricsError::UnknownLabel(format!("{l:?}")));
        }
    }
    let mut per_class = Vec::with_capacity(classes.len());
    let mut absent = Vec::new();
    let mut total = 0.0;
    for class in classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (p, t) in predicted.iter().zip(truth.iter()) {
            match (p == class, t == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let f1 = if tp + fp + fn_ == 0 {
            absent.push(class.clone());
            1.0
        } else if tp == 0 {
            0.0
        } else {
            let p = tp as f64 / (tp + fp) as f64;
            let r = tp as f64 / (tp + fn_) as f64;
            2.0 * p * r / (p + r)
        };
        per_class.push((class.clone(), f1));
        total += f1;
    }
    Ok(MacroF1 {
        macro_f1: total / classes.len() as f64,
        per_class,
        absent,
    })
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// Everything a metric run produced, with the configuration inline so
/// numbers are never compared across incompatible setups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binarized_r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    pub config: MetricReportConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReportConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_space: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub real_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class_f1: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub absent_classes: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recipe: Option<String>,
}
