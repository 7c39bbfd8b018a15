//! Vector-quantized autoencoder over pressure-map sequences.
//!
//! Frames enter as `H*W` channels over the time axis; a stack of 1-D
//! convolutional residual blocks downsamples time by a factor `l` and
//! projects to `D`-dimensional latents. A quantizer snaps each latent to its
//! nearest codebook entry (gradients pass straight through), and a mirrored
//! decoder reconstructs the frames. Training combines a reconstruction and a
//! quantization (commitment) term under scheduled annealing weights, with
//! codebook entries maintained by EMA statistics.

mod codebook;
mod model;
mod train;

pub use codebook::{Codebook, DEAD_CODE_THRESHOLD, EMA_EPS};
pub use model::{CodecCheckpoint, CodecGeometry};
pub use train::{
    reconstruction_mse, train_codec, train_codec_kfold, CodecTrainConfig, CodecTrainOutcome,
    ValPoint,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PressureSequence};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("sequence must be normalized before encoding")]
    NotNormalized,
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("codebook must be non-empty")]
    EmptyCodebook,
    #[error("code index {index} out of range for codebook of {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: L_r={reconstruction}, L_q={quantization}")]
    NonFiniteLoss {
        step: usize,
        reconstruction: f64,
        quantization: f64,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Encoder output: one `D`-dimensional vector per `l` input frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    /// Row `t` is the latent vector for time step `t`; shape `(ceil(T/l), D)`.
    pub vectors: Array2<f64>,
    /// Temporal downsampling factor `l`.
    pub downsample: usize,
    /// Frame count of the sequence this was encoded from; decode trims its
    /// output back to this length.
    pub original_len: usize,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Piecewise-linear schedule for the loss weights.
///
/// Both weights stay at their start values for `hold_steps`, interpolate
/// linearly to their end values over the following `warmup_steps`, and stay
/// constant afterwards. `w_r` may only fall and `w_q` may only rise.
///
/// The hold phase matters: quantization pressure applied before the
/// reconstruction pathway has formed swamps the (initially tiny) content
/// gradients and the codec collapses onto predicting the dataset mean.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnnealSchedule {
    /// Steps at the start values before the ramp begins.
    #[serde(default)]
    pub hold_steps: usize,
    pub warmup_steps: usize,
    pub w_r_start: f64,
    pub w_r_end: f64,
    pub w_q_start: f64,
    pub w_q_end: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            hold_steps: 0,
            warmup_steps: 1000,
            w_r_start: 1.0,
            w_r_end: 1.0,
            w_q_start: 0.0,
            w_q_end: 1.0,
        }
    }
}

impl AnnealSchedule {
    /// A constant-weight schedule, i.e. annealing disabled.
    pub fn constant(w_r: f64, w_q: f64) -> Self {
        AnnealSchedule {
            hold_steps: 0,
            warmup_steps: 0,
            w_r_start: w_r,
            w_r_end: w_r,
            w_q_start: w_q,
            w_q_end: w_q,
        }
    }

    /// The shape that trains well in practice: a pure-reconstruction hold
    /// phase while the content pathway forms, then a ramp over the next
    /// quarter of the budget. The quantization weight ends small; on
    /// normalized mat data the reconstruction term is tiny and a
    /// full-strength commitment pressure collapses the encoder onto the
    /// dictionary before it encodes anything.
    pub fn hold_then_ramp(total_steps: usize) -> Self {
        AnnealSchedule {
            hold_steps: total_steps / 2,
            warmup_steps: (total_steps / 4).max(1),
            w_r_start: 1.0,
            w_r_end: 1.0,
            w_q_start: 0.0,
            w_q_end: 0.01,
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let weights = [self.w_r_start, self.w_r_end, self.w_q_start, self.w_q_end];
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(CodecError::InvalidConfig(
                "schedule weights must lie in [0, 1]".into(),
            ));
        }
        if self.w_q_start > self.w_q_end {
            return Err(CodecError::InvalidConfig(
                "w_q must be non-decreasing over training".into(),
            ));
        }
        if self.w_r_start < self.w_r_end {
            return Err(CodecError::InvalidConfig(
                "w_r must be non-increasing over training".into(),
            ));
        }
        Ok(())
    }
}

/// Ramp progress at step `t`: 0 through the hold phase, rising linearly to
/// 1 across the warmup window.
pub fn anneal_fraction(t: usize, sched: &AnnealSchedule) -> f64 {
    let ramped = t.saturating_sub(sched.hold_steps);
    if sched.warmup_steps == 0 {
        if t < sched.hold_steps {
            0.0
        } else {
            1.0
        }
    } else {
        (ramped as f64 / sched.warmup_steps as f64).min(1.0)
    }
}

/// Loss weights at step `t`: start values through the hold phase, linear
/// interpolation across the warmup window, constant afterwards.
pub fn anneal_weights(t: usize, sched: &AnnealSchedule) -> (f64, f64) {
    let frac = anneal_fraction(t, sched);
    let w_r = sched.w_r_start + (sched.w_r_end - sched.w_r_start) * frac;
    let w_q = sched.w_q_start + (sched.w_q_end - sched.w_q_start) * frac;
    (w_r, w_q)
}

/// One logged training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub quantization: f64,
    pub w_r: f64,
    pub w_q: f64,
    pub step: usize,
}

/// Combine reconstruction MSE and quantization loss under the schedule at
/// step `t`. `total` is exactly `w_r * L_r + w_q * L_q`.
pub fn loss(
    x: &PressureSequence,
    x_hat: &PressureSequence,
    l_q: f64,
    t: usize,
    sched: &AnnealSchedule,
) -> Result<LossBreakdown, CodecError> {
    if x.len() != x_hat.len() || x.height() != x_hat.height() || x.width() != x_hat.width() {
        return Err(CodecError::DimensionMismatch(format!(
            "x is {}x{}x{}, x_hat is {}x{}x{}",
            x.len(),
            x.height(),
            x.width(),
            x_hat.len(),
            x_hat.height(),
            x_hat.width()
        )));
    }
    let mut sum_sq = 0.0;
    let mut n = 0usize;
    for (fa, fb) in x.frames.iter().zip(x_hat.frames.iter()) {
        for (&a, &b) in fa.grid().iter().zip(fb.grid().iter()) {
            let d = a as f64 - b as f64;
            sum_sq += d * d;
            n += 1;
        }
    }
    let reconstruction = sum_sq / n as f64;
    let (w_r, w_q) = anneal_weights(t, sched);
    Ok(LossBreakdown {
        total: w_r * reconstruction + w_q * l_q,
        reconstruction,
        quantization: l_q,
        w_r,
        w_q,
        step: t,
    })
}

/// Nearest-entry assignment for a block of latent rows.
///
/// Returns `(indices, quantized rows, mean squared distance)`. Ties break
/// toward the smallest code index.
pub(crate) fn nearest_entries(
    vectors: &Array2<f64>,
    entries: &Array2<f64>,
) -> (Vec<usize>, Array2<f64>, f64) {
    let n = vectors.nrows();
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Array2::zeros(vectors.raw_dim());
    let mut total_sq = 0.0;
    for (row_i, row) in vectors.rows().into_iter().enumerate() {
        let mut best_k = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, entry) in entries.rows().into_iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(entry.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best_k = k;
            }
        }
        indices.push(best_k);
        quantized.row_mut(row_i).assign(&entries.row(best_k));
        total_sq += best_d;
    }
    let l_q = if n == 0 { 0.0 } else { total_sq / n as f64 };
    (indices, quantized, l_q)
}

/// Snap each latent vector to its nearest codebook entry.
///
/// Returns the chosen indices, the quantized latents, and the quantization
/// loss `l_q = mean_t ||lat_t - entry_{i_t}||^2`. During training the
/// backward contract is straight-through: the gradient arriving at the
/// quantizer output is handed to the encoder output unchanged (see
/// `nn::Graph::straight_through`).
pub fn quantize(
    lat: &LatentSequence,
    cb: &Codebook,
) -> Result<(Vec<usize>, LatentSequence, f64), CodecError> {
    if cb.is_empty() {
        return Err(CodecError::EmptyCodebook);
    }
    if lat.dim() != cb.dim() {
        return Err(CodecError::DimensionMismatch(format!(
            "latent width {} does not match codebook width {}",
            lat.dim(),
            cb.dim()
        )));
    }
    let (indices, vectors, l_q) = nearest_entries(&lat.vectors, cb.entries());
    Ok((
        indices,
        LatentSequence {
            vectors,
            downsample: lat.downsample,
            original_len: lat.original_len,
        },
        l_q,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ActivityClass, PressureFrame};
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn latent(rows: &[[f64; 2]]) -> LatentSequence {
        LatentSequence {
            vectors: Array2::from_shape_vec(
                (rows.len(), 2),
                rows.iter().flatten().copied().collect(),
            )
            .unwrap(),
            downsample: 4,
            original_len: rows.len() * 4,
        }
    }

    fn two_entry_codebook() -> Codebook {
        Codebook::with_stats(
            arr2(&[[0.0, 0.0], [1.0, 1.0]]),
            ndarray::arr1(&[1.0, 1.0]),
            arr2(&[[0.0, 0.0], [1.0, 1.0]]),
            99,
        )
        .unwrap()
    }

    #[test]
    fn quantize_picks_nearest_and_reports_l_q() {
        let (idx, q, l_q) = quantize(&latent(&[[0.1, 0.1]]), &two_entry_codebook()).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(q.vectors.row(0).to_vec(), vec![0.0, 0.0]);
        assert!((l_q - 0.02).abs() < 1e-12);
    }

    #[test]
    fn exact_match_has_zero_loss() {
        let (idx, _, l_q) = quantize(&latent(&[[1.0, 1.0]]), &two_entry_codebook()).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(l_q, 0.0);
    }

    #[test]
    fn ties_break_toward_smaller_index() {
        let (idx, q, _) = quantize(&latent(&[[0.5, 0.5]]), &two_entry_codebook()).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(q.vectors.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn quantize_matches_brute_force_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            use rand::Rng;
            let k = rng.gen_range(1..64);
            let d = rng.gen_range(1..8);
            let n = rng.gen_range(1..10);
            let entries = crate::nn::randn(&mut rng, &[k, d], 1.0)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let cb = Codebook::with_stats(
                entries.clone(),
                ndarray::Array1::ones(k),
                entries.clone(),
                9,
            )
            .unwrap();
            let vectors = crate::nn::randn(&mut rng, &[n, d], 1.0)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let lat = LatentSequence { vectors: vectors.clone(), downsample: 1, original_len: n };
            let (idx, _, _) = quantize(&lat, &cb).unwrap();
            for (row, &got) in vectors.rows().into_iter().zip(idx.iter()) {
                let mut best = (0usize, f64::INFINITY);
                for (kk, e) in entries.rows().into_iter().enumerate() {
                    let dist: f64 =
                        row.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best.1 {
                        best = (kk, dist);
                    }
                }
                assert_eq!(got, best.0);
            }
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let lat = LatentSequence {
            vectors: Array2::zeros((1, 3)),
            downsample: 4,
            original_len: 4,
        };
        assert!(matches!(
            quantize(&lat, &two_entry_codebook()),
            Err(CodecError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn anneal_default_schedule_endpoints_and_midpoint() {
        let sched = AnnealSchedule::default();
        assert_eq!(anneal_weights(0, &sched), (1.0, 0.0));
        assert_eq!(anneal_weights(500, &sched), (1.0, 0.5));
        assert_eq!(anneal_weights(10_000, &sched), (1.0, 1.0));
    }

    #[test]
    fn anneal_is_monotone_and_bounded() {
        let sched = AnnealSchedule {
            hold_steps: 0,
            warmup_steps: 137,
            w_r_start: 0.9,
            w_r_end: 0.4,
            w_q_start: 0.1,
            w_q_end: 0.8,
        };
        sched.validate().unwrap();
        let mut prev = anneal_weights(0, &sched);
        for t in 1..400 {
            let (w_r, w_q) = anneal_weights(t, &sched);
            assert!((0.0..=1.0).contains(&w_r) && (0.0..=1.0).contains(&w_q));
            assert!(w_r <= prev.0 + 1e-12, "w_r increased at {t}");
            assert!(w_q >= prev.1 - 1e-12, "w_q decreased at {t}");
            prev = (w_r, w_q);
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(AnnealSchedule {
            hold_steps: 0,
            warmup_steps: 10,
            w_r_start: 1.0,
            w_r_end: 1.0,
            w_q_start: 0.9,
            w_q_end: 0.1,
        }
        .validate()
        .is_err());
        assert!(AnnealSchedule::constant(1.2, 0.0).validate().is_err());
    }

    fn flat_seq(cells: Vec<f32>, h: usize, w: usize) -> PressureSequence {
        let frame =
            PressureFrame::new(Array2::from_shape_vec((h, w), cells).unwrap()).unwrap();
        PressureSequence::new(
            vec![frame],
            "t".into(),
            ActivityClass::Basic,
            String::new(),
            None,
            true,
        )
        .unwrap()
    }

    #[test]
    fn loss_combines_terms_exactly() {
        let x = flat_seq(vec![0.0; 4], 2, 2);
        let x_hat = flat_seq(vec![1.0; 4], 2, 2);
        // all-zero vs all-one: L_r = 1.0
        let sched = AnnealSchedule::constant(1.0, 0.5);
        let b = loss(&x, &x_hat, 0.2, 0, &sched).unwrap();
        assert_eq!(b.reconstruction, 1.0);
        assert!((b.total - (1.0 * 1.0 + 0.5 * 0.2)).abs() < 1e-15);

        let zero = loss(&x, &x, 0.0, 0, &sched).unwrap();
        assert_eq!(zero.total, 0.0);
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let x = flat_seq(vec![0.0; 4], 2, 2);
        let y = flat_seq(vec![0.0; 4], 1, 4);
        assert!(matches!(
            loss(&x, &y, 0.0, 0, &AnnealSchedule::default()),
            Err(CodecError::DimensionMismatch(_))
        ));
    }
}
