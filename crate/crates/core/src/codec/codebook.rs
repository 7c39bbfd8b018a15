//! The learned dictionary of latent code vectors.
//!
//! Code entries are never updated by gradient descent. The default path
//! tracks per-code exponential moving averages of assignment counts and
//! assigned-latent sums,
//!
//! ```text
//! ema_t = (1 - alpha) * ema_{t-1} + alpha * batch_stat_t,   alpha = 2 / (N + 1)
//! ```
//!
//! and each entry is the ratio `ema_sums / (ema_counts + eps)`. Keeping the
//! recurrence on counts and sums rather than on the entries themselves makes
//! an unassigned code hold its position (both statistics shrink by the same
//! factor) instead of drifting toward stale batches. Codes whose count decays
//! below [`DEAD_CODE_THRESHOLD`] are revived onto a random latent from the
//! current batch.
//!
//! The alternative [`Codebook::sgd_update`] implements the classic
//! gradient-style dictionary update and exists for the no-EMA ablation.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::CodecError;

/// Laplace floor in the count denominator.
pub const EMA_EPS: f64 = 1e-5;
/// Codes with `ema_counts` below this are re-seeded from the batch.
pub const DEAD_CODE_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Array2<f64>,
    ema_counts: Array1<f64>,
    ema_sums: Array2<f64>,
    usage: Vec<u64>,
    n_horizon: usize,
    alpha: f64,
}

impl Codebook {
    /// Random-normal initial entries; EMA statistics start consistent with
    /// them (`counts = 1`, `sums = entries`) so the first ratio update leaves
    /// untouched codes in place.
    pub fn new(k: usize, d: usize, n_horizon: usize, rng: &mut ChaCha8Rng) -> Result<Self, CodecError> {
        if k == 0 || d == 0 {
            return Err(CodecError::EmptyCodebook);
        }
        if n_horizon == 0 {
            return Err(CodecError::InvalidConfig("EMA horizon N must be >= 1".into()));
        }
        let entries = crate::nn::randn(rng, &[k, d], 0.1)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("randn returns requested shape");
        Ok(Self {
            ema_counts: Array1::ones(k),
            ema_sums: entries.clone(),
            usage: vec![0; k],
            n_horizon,
            alpha: 2.0 / (n_horizon as f64 + 1.0),
            entries,
        })
    }

    /// Rebuild from checkpoint blobs.
    pub fn from_parts(
        entries: Array2<f64>,
        ema_counts: Array1<f64>,
        ema_sums: Array2<f64>,
        usage: Vec<u64>,
        n_horizon: usize,
    ) -> Result<Self, CodecError> {
        let (k, d) = entries.dim();
        if k == 0 || d == 0 {
            return Err(CodecError::EmptyCodebook);
        }
        if ema_counts.len() != k || ema_sums.dim() != (k, d) || usage.len() != k {
            return Err(CodecError::DimensionMismatch(
                "codebook statistics do not match entry shape".into(),
            ));
        }
        if n_horizon == 0 {
            return Err(CodecError::InvalidConfig("EMA horizon N must be >= 1".into()));
        }
        Ok(Self {
            entries,
            ema_counts,
            ema_sums,
            usage,
            n_horizon,
            alpha: 2.0 / (n_horizon as f64 + 1.0),
        })
    }

    /// Test/bench constructor with explicit statistics.
    pub fn with_stats(
        entries: Array2<f64>,
        ema_counts: Array1<f64>,
        ema_sums: Array2<f64>,
        n_horizon: usize,
    ) -> Result<Self, CodecError> {
        let k = entries.nrows();
        Self::from_parts(entries, ema_counts, ema_sums, vec![0; k], n_horizon)
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_horizon(&self) -> usize {
        self.n_horizon
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn ema_counts(&self) -> &Array1<f64> {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Array2<f64> {
        &self.ema_sums
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Gather entry rows for a token sequence.
    pub fn lookup(&self, indices: &[usize]) -> Result<Array2<f64>, CodecError> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(CodecError::IndexOutOfRange { index: i, len: self.len() });
            }
            out.row_mut(row).assign(&self.entries.row(i));
        }
        Ok(out)
    }

    /// One EMA step over a batch of latents and their assigned code indices.
    ///
    /// An empty batch is a no-op. Dead codes are revived onto a random batch
    /// latent with statistics reset to match (`count = 1`, `sum = latent`).
    pub fn ema_update(
        &mut self,
        latents: &Array2<f64>,
        indices: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(), CodecError> {
        if latents.nrows() != indices.len() {
            return Err(CodecError::DimensionMismatch(format!(
                "{} latents but {} indices",
                latents.nrows(),
                indices.len()
            )));
        }
        if latents.is_empty() {
            return Ok(());
        }
        if latents.ncols() != self.dim() {
            return Err(CodecError::DimensionMismatch(format!(
                "latent width {} does not match codebook width {}",
                latents.ncols(),
                self.dim()
            )));
        }
        let k = self.len();
        let mut batch_counts = Array1::<f64>::zeros(k);
        let mut batch_sums = Array2::<f64>::zeros((k, self.dim()));
        for (row, &i) in indices.iter().enumerate() {
            if i >= k {
                return Err(CodecError::IndexOutOfRange { index: i, len: k });
            }
            batch_counts[i] += 1.0;
            let mut acc = batch_sums.row_mut(i);
            acc += &latents.row(row);
            self.usage[i] += 1;
        }

        let a = self.alpha;
        self.ema_counts.zip_mut_with(&batch_counts, |e, &b| *e = (1.0 - a) * *e + a * b);
        self.ema_sums.zip_mut_with(&batch_sums, |e, &b| *e = (1.0 - a) * *e + a * b);
        for ki in 0..k {
            let denom = self.ema_counts[ki] + EMA_EPS;
            let mut entry = self.entries.row_mut(ki);
            entry.assign(&(&self.ema_sums.row(ki) / denom));
        }

        for ki in 0..k {
            if self.ema_counts[ki] < DEAD_CODE_THRESHOLD {
                let pick = rng.gen_range(0..latents.nrows());
                let latent = latents.row(pick);
                self.entries.row_mut(ki).assign(&latent);
                self.ema_sums.row_mut(ki).assign(&latent);
                self.ema_counts[ki] = 1.0;
            }
        }
        Ok(())
    }

    /// Gradient-style dictionary update for the no-EMA ablation: one SGD
    /// step on `(1/n) * sum_t || sg(latent_t) - entry_{i_t} ||^2`.
    pub fn sgd_update(
        &mut self,
        latents: &Array2<f64>,
        indices: &[usize],
        lr: f64,
    ) -> Result<(), CodecError> {
        if latents.nrows() != indices.len() {
            return Err(CodecError::DimensionMismatch(format!(
                "{} latents but {} indices",
                latents.nrows(),
                indices.len()
            )));
        }
        if latents.is_empty() {
            return Ok(());
        }
        let n = latents.nrows() as f64;
        let mut grad = Array2::<f64>::zeros(self.entries.dim());
        for (row, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(CodecError::IndexOutOfRange { index: i, len: self.len() });
            }
            self.usage[i] += 1;
            let diff = &self.entries.row(i) - &latents.row(row);
            let mut gr = grad.row_mut(i);
            gr += &(diff * (2.0 / n));
        }
        self.entries -= &(grad * lr);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;

    #[test]
    fn alpha_follows_horizon_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cb = Codebook::new(8, 2, 99, &mut rng).unwrap();
        assert_eq!(cb.alpha(), 0.02);
        let cb = Codebook::new(8, 2, 1, &mut rng).unwrap();
        assert_eq!(cb.alpha(), 1.0);
    }

    #[test]
    fn single_assignment_from_zero_stats_lands_near_latent() {
        // counts 0, n_k = 1, latent v: counts -> alpha, entry -> ~v.
        let entries = arr2(&[[0.0, 0.0], [5.0, 5.0]]);
        let mut cb = Codebook::with_stats(
            entries,
            Array1::zeros(2),
            Array2::zeros((2, 2)),
            99,
        )
        .unwrap();
        let v = arr2(&[[1.0, -2.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        cb.ema_update(&v, &[0], &mut rng).unwrap();
        assert!((cb.ema_counts()[0] - 0.02).abs() < 1e-12);
        let e = cb.entries().row(0);
        // ratio cancels alpha up to the Laplace eps
        assert!((e[0] - 1.0).abs() < 1e-3, "{}", e[0]);
        assert!((e[1] + 2.0).abs() < 2e-3, "{}", e[1]);
        assert_eq!(cb.usage()[0], 1);
    }

    #[test]
    fn unassigned_code_keeps_its_ratio() {
        let entries = arr2(&[[3.0, -1.0], [0.5, 0.5]]);
        let counts = ndarray::arr1(&[2.0, 2.0]);
        let sums = arr2(&[[6.0, -2.0], [1.0, 1.0]]);
        let mut cb = Codebook::with_stats(entries, counts, sums, 99).unwrap();
        let before = cb.entries().row(0).to_owned();
        let batch = arr2(&[[0.5, 0.5]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        cb.ema_update(&batch, &[1], &mut rng).unwrap();
        let after = cb.entries().row(0);
        for (b, a) in before.iter().zip(after.iter()) {
            assert!((b - a).abs() < 1e-4, "entry drifted: {b} -> {a}");
            assert!(a.is_finite());
        }
    }

    #[test]
    fn empty_batch_is_a_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cb = Codebook::new(4, 3, 9, &mut rng).unwrap();
        let before = cb.entries().clone();
        cb.ema_update(&Array2::zeros((0, 3)), &[], &mut rng).unwrap();
        assert_eq!(&before, cb.entries());
    }

    #[test]
    fn dead_code_is_revived_from_batch() {
        let entries = arr2(&[[100.0, 100.0], [0.0, 0.0]]);
        // code 0 has essentially no mass left
        let counts = ndarray::arr1(&[1e-4, 5.0]);
        let sums = arr2(&[[0.01, 0.01], [0.0, 0.0]]);
        let mut cb = Codebook::with_stats(entries, counts, sums, 99).unwrap();
        let batch = arr2(&[[7.0, 8.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        cb.ema_update(&batch, &[1], &mut rng).unwrap();
        assert_eq!(cb.entries().row(0).to_vec(), vec![7.0, 8.0]);
        assert_eq!(cb.ema_counts()[0], 1.0);
    }

    #[test]
    fn repeated_cluster_batches_converge_to_cluster_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cb = Codebook::new(4, 2, 99, &mut rng).unwrap();
        let clusters = arr2(&[[1.0, 1.0], [-1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]]);
        for _ in 0..2000 {
            let (idx, _, _) = super::super::nearest_entries(&clusters, cb.entries());
            cb.ema_update(&clusters, &idx, &mut rng).unwrap();
        }
        let (idx, _, _) = super::super::nearest_entries(&clusters, cb.entries());
        for (row, &code) in idx.iter().enumerate() {
            let dist: f64 = clusters
                .row(row)
                .iter()
                .zip(cb.entries().row(code).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist < 1e-2, "cluster {row} -> code {code}, dist {dist}");
        }
    }
}
