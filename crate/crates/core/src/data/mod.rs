//! Pressure-map sequences on disk and in memory.
//!
//! The on-disk layout of a dataset is a directory of `PSEQ1` binary files
//! (one per sequence, see [`format`]) plus a `manifest.json` carrying the
//! per-sequence metadata. Raw cell values are millimeters of mercury in
//! `[0, 5000]`; [`normalize`] rescales to `[0, 1]` for model consumption.

mod format;
mod split;
mod synth;

pub use format::{load_sequence, load_sequence_with_manifest, save_sequence};
pub use split::{allocate_counts, split_dataset, SplitFractions};
pub use synth::{synth_dataset, synth_sequences, ClassTemplate, SensorNoise, SynthConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sensor ceiling in raw units (mmHg). Cells are normalized by this value.
pub const PRESSURE_CEILING: f32 = 5000.0;

/// Canonical sensor grid: 80 rows by 28 columns.
pub const CANONICAL_HEIGHT: usize = 80;
/// Canonical sensor grid: 80 rows by 28 columns.
pub const CANONICAL_WIDTH: usize = 28;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected PSEQ1, got {got:?}")]
    BadMagic { got: [u8; 5] },
    #[error("truncated payload: expected {expected} bytes after header, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("trailing data: {extra} unexpected bytes after payload")]
    TrailingData { extra: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite cell value at frame {frame}, row {row}, col {col}")]
    NonFinite { frame: usize, row: usize, col: usize },
    #[error("cell value out of range at frame {frame}: {value} (limit {limit})")]
    OutOfRange { frame: usize, value: f32, limit: f32 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence is already normalized")]
    AlreadyNormalized,
    #[error("sequence is not normalized")]
    NotNormalized,
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// The four activity categories every sequence is labelled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityClass {
    Basic,
    Dance,
    Yoga,
    Workout,
}

impl ActivityClass {
    pub const ALL: [ActivityClass; 4] = [
        ActivityClass::Basic,
        ActivityClass::Dance,
        ActivityClass::Yoga,
        ActivityClass::Workout,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ActivityClass::Basic => "basic",
            ActivityClass::Dance => "dance",
            ActivityClass::Yoga => "yoga",
            ActivityClass::Workout => "workout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "basic" => Some(ActivityClass::Basic),
            "dance" => Some(ActivityClass::Dance),
            "yoga" => Some(ActivityClass::Yoga),
            "workout" => Some(ActivityClass::Workout),
            _ => None,
        }
    }
}

impl fmt::Display for ActivityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One pressure reading of the whole mat at a single time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureFrame {
    grid: Array2<f32>,
}

impl PressureFrame {
    /// Wrap a grid, checking finiteness and the non-negativity invariant.
    /// The ceiling (`5000` raw, `1.0` normalized) is checked by
    /// [`PressureSequence::new`], which knows the unit.
    pub fn new(grid: Array2<f32>) -> Result<Self, DataError> {
        for ((r, c), &v) in grid.indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFinite { frame: 0, row: r, col: c });
            }
            if v < 0.0 {
                return Err(DataError::OutOfRange { frame: 0, value: v, limit: 0.0 });
            }
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Array2<f32> {
        &self.grid
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }
}

/// A timed stack of equally sized pressure frames with activity metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureSequence {
    pub frames: Vec<PressureFrame>,
    pub activity_id: String,
    pub class_label: ActivityClass,
    pub description: String,
    pub subject_id: Option<String>,
    pub normalized: bool,
}

impl PressureSequence {
    pub fn new(
        frames: Vec<PressureFrame>,
        activity_id: String,
        class_label: ActivityClass,
        description: String,
        subject_id: Option<String>,
        normalized: bool,
    ) -> Result<Self, DataError> {
        if frames.is_empty() {
            return Err(DataError::DimensionMismatch("sequence must have T >= 1".into()));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        if h == 0 || w == 0 {
            return Err(DataError::DimensionMismatch("frame dimensions must be positive".into()));
        }
        let limit = if normalized { 1.0 } else { PRESSURE_CEILING };
        for (i, f) in frames.iter().enumerate() {
            if f.height() != h || f.width() != w {
                return Err(DataError::DimensionMismatch(format!(
                    "frame {i} is {}x{}, expected {h}x{w}",
                    f.height(),
                    f.width()
                )));
            }
            if let Some(&v) = f.grid.iter().find(|v| **v > limit) {
                return Err(DataError::OutOfRange { frame: i, value: v, limit });
            }
        }
        Ok(Self {
            frames,
            activity_id,
            class_label,
            description,
            subject_id,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Mean frame over time; used by sanity checks and simple classifiers.
    pub fn mean_frame(&self) -> Array2<f32> {
        let mut acc = Array2::<f32>::zeros((self.height(), self.width()));
        for f in &self.frames {
            acc += f.grid();
        }
        acc / self.frames.len() as f32
    }
}

/// Rescale raw mmHg cells into `[0, 1]` by the sensor ceiling.
///
/// Normalizing an already normalized sequence is an error rather than a
/// no-op, so unit mix-ups fail loudly.
pub fn normalize(seq: &PressureSequence) -> Result<PressureSequence, DataError> {
    if seq.normalized {
        return Err(DataError::AlreadyNormalized);
    }
    let frames = seq
        .frames
        .iter()
        .map(|f| PressureFrame { grid: f.grid.mapv(|v| v / PRESSURE_CEILING) })
        .collect();
    Ok(PressureSequence {
        frames,
        normalized: true,
        ..seq.clone()
    })
}

/// Inverse of [`normalize`]: back to raw mmHg for on-disk storage.
pub fn denormalize(seq: &PressureSequence) -> Result<PressureSequence, DataError> {
    if !seq.normalized {
        return Err(DataError::NotNormalized);
    }
    let frames = seq
        .frames
        .iter()
        .map(|f| PressureFrame { grid: f.grid.mapv(|v| v * PRESSURE_CEILING) })
        .collect();
    Ok(PressureSequence {
        frames,
        normalized: false,
        ..seq.clone()
    })
}

/// Which split an entry landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

/// One sequence file plus its metadata, as stored in `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path of the sequence file, relative to the manifest's directory.
    pub path: String,
    pub description: String,
    pub class_label: ActivityClass,
    pub subject_id: Option<String>,
    pub frames: usize,
}

/// Index of a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<BTreeMap<String, Split>>,
}

impl DatasetManifest {
    pub fn total_sequences(&self) -> usize {
        self.entries.len()
    }

    pub fn total_frames(&self) -> usize {
        self.entries.iter().map(|e| e.frames).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if let Some(splits) = &manifest.splits {
            for key in splits.keys() {
                if !manifest.entries.iter().any(|e| &e.path == key) {
                    return Err(DataError::Manifest(format!(
                        "split assignment references unknown entry {key}"
                    )));
                }
            }
        }
        Ok(manifest)
    }

    /// Entries restricted to one split; all entries when no split is recorded.
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        match &self.splits {
            None => self.entries.iter().collect(),
            Some(map) => self
                .entries
                .iter()
                .filter(|e| map.get(&e.path) == Some(&split))
                .collect(),
        }
    }

    /// Load every sequence of the manifest (optionally one split), resolving
    /// entry paths against `dir`.
    pub fn load_sequences(
        &self,
        dir: &Path,
        split: Option<Split>,
    ) -> Result<Vec<PressureSequence>, DataError> {
        let entries: Vec<&ManifestEntry> = match split {
            Some(s) => self.split_entries(s),
            None => self.entries.iter().collect(),
        };
        entries
            .into_iter()
            .map(|e| format::load_entry(dir, e))
            .collect()
    }
}
