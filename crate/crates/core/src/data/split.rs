//! Deterministic train/test/val splitting at sequence granularity.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetManifest, Split};

/// Requested (train, test, val) proportions.
#[derive(Debug, Clone, Copy)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl SplitFractions {
    /// The reference proportions: 66,200 / 5,120 / 15,080 out of 86,400.
    pub fn default_fractions() -> Self {
        SplitFractions {
            train: 66_200.0 / 86_400.0,
            test: 5_120.0 / 86_400.0,
            val: 15_080.0 / 86_400.0,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        for (name, f) in [("train", self.train), ("test", self.test), ("val", self.val)] {
            if !(f > 0.0 && f.is_finite()) {
                return Err(DataError::InvalidConfig(format!(
                    "split fraction {name} must be positive, got {f}"
                )));
            }
        }
        let sum = self.train + self.test + self.val;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidConfig(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `total` items across `fractions`.
///
/// Floors each target, then hands the leftover items to the largest
/// fractional remainders; ties go to the earlier partition. The result sums
/// to `total` exactly and each count differs from its real-valued target by
/// less than one.
pub fn allocate_counts(total: usize, fractions: &[f64]) -> Vec<usize> {
    let targets: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut leftover = total - assigned;
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}

/// Assign every entry of `manifest` to train, test, or val.
///
/// The shuffle is a seeded permutation of entry order and splitting happens
/// at sequence granularity: a sequence is never divided across partitions,
/// so no frames leak between train and evaluation data.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    fractions.validate()?;
    let n = manifest.entries.len();
    if n < 3 {
        return Err(DataError::InvalidConfig(format!(
            "need at least 3 sequences to form 3 splits, got {n}"
        )));
    }
    let counts = allocate_counts(n, &[fractions.train, fractions.test, fractions.val]);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut splits = BTreeMap::new();
    for (rank, &idx) in order.iter().enumerate() {
        let split = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Test
        } else {
            Split::Val
        };
        splits.insert(manifest.entries[idx].path.clone(), split);
    }

    Ok(DatasetManifest {
        entries: manifest.entries.clone(),
        seed: manifest.seed,
        splits: Some(splits),
    })
}
