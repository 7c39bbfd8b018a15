//! The `PSEQ1` binary sequence format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..5    magic "PSEQ1"
//! bytes 5..9    u32  T  (frame count)
//! bytes 9..11   u16  H  (rows)
//! bytes 11..13  u16  W  (cols)
//! then          T * H * W  f32 cells, frame-major then row-major
//! ```
//!
//! The file carries no metadata; that lives in the sibling `manifest.json`.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{ActivityClass, DataError, DatasetManifest, ManifestEntry, PressureFrame, PressureSequence};

const MAGIC: &[u8; 5] = b"PSEQ1";
const HEADER_LEN: usize = 5 + 4 + 2 + 2;

/// Serialize a sequence to `PSEQ1` bytes.
pub fn encode_sequence(seq: &PressureSequence) -> Result<Vec<u8>, DataError> {
    let t = seq.len();
    let (h, w) = (seq.height(), seq.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(DataError::DimensionMismatch(format!(
            "grid {h}x{w} exceeds the u16 header fields"
        )));
    }
    if t > u32::MAX as usize {
        return Err(DataError::DimensionMismatch("frame count exceeds u32".into()));
    }
    for (i, frame) in seq.frames.iter().enumerate() {
        for ((r, c), &v) in frame.grid().indexed_iter() {
            if !v.is_finite() {
                return Err(DataError::NonFinite { frame: i, row: r, col: c });
            }
        }
    }

    let mut out = Vec::with_capacity(HEADER_LEN + t * h * w * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    out.extend_from_slice(&(w as u16).to_le_bytes());
    for frame in &seq.frames {
        for &v in frame.grid().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write a sequence as a `PSEQ1` file. Nothing is written if validation
/// fails.
pub fn save_sequence(seq: &PressureSequence, path: &Path) -> Result<(), DataError> {
    let bytes = encode_sequence(seq)?;
    fs::write(path, bytes).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })
}

/// Parse `PSEQ1` bytes into frames.
pub fn decode_sequence(bytes: &[u8]) -> Result<Vec<PressureFrame>, DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated { expected: HEADER_LEN, got: bytes.len() });
    }
    if &bytes[..5] != MAGIC {
        let mut got = [0u8; 5];
        got.copy_from_slice(&bytes[..5]);
        return Err(DataError::BadMagic { got });
    }
    let t = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(bytes[9..11].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(bytes[11..13].try_into().unwrap()) as usize;
    if t == 0 || h == 0 || w == 0 {
        return Err(DataError::DimensionMismatch(format!(
            "header declares T={t}, H={h}, W={w}; all must be positive"
        )));
    }

    let payload = &bytes[HEADER_LEN..];
    let expected = t * h * w * 4;
    if payload.len() < expected {
        return Err(DataError::Truncated { expected, got: payload.len() });
    }
    if payload.len() > expected {
        return Err(DataError::TrailingData { extra: payload.len() - expected });
    }

    let mut frames = Vec::with_capacity(t);
    let frame_len = h * w * 4;
    for fi in 0..t {
        let chunk = &payload[fi * frame_len..(fi + 1) * frame_len];
        let cells: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let grid = Array2::from_shape_vec((h, w), cells)
            .expect("length checked above");
        frames.push(PressureFrame::new(grid).map_err(|e| match e {
            DataError::NonFinite { row, col, .. } => DataError::NonFinite { frame: fi, row, col },
            DataError::OutOfRange { value, limit, .. } => {
                DataError::OutOfRange { frame: fi, value, limit }
            }
            other => other,
        })?);
    }
    Ok(frames)
}

/// Load a `PSEQ1` file, taking metadata from the sibling `manifest.json`
/// when one exists and mentions this file, else falling back to defaults
/// (class `basic`, empty description, raw units).
pub fn load_sequence(path: &Path) -> Result<PressureSequence, DataError> {
    let manifest_path = path.parent().map(|d| d.join("manifest.json"));
    let entry = manifest_path
        .as_deref()
        .filter(|m| m.is_file())
        .and_then(|m| DatasetManifest::load(m).ok())
        .and_then(|manifest| {
            let name = path.file_name()?.to_str()?.to_string();
            manifest.entries.iter().find(|e| e.path == name).cloned()
        });
    load_with_metadata(path, entry.as_ref())
}

/// Load a sequence whose metadata entry is already known.
pub fn load_sequence_with_manifest(
    path: &Path,
    entry: &ManifestEntry,
) -> Result<PressureSequence, DataError> {
    load_with_metadata(path, Some(entry))
}

pub(super) fn load_entry(dir: &Path, entry: &ManifestEntry) -> Result<PressureSequence, DataError> {
    load_with_metadata(&dir.join(&entry.path), Some(entry))
}

fn load_with_metadata(
    path: &Path,
    entry: Option<&ManifestEntry>,
) -> Result<PressureSequence, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let frames = decode_sequence(&bytes)?;
    if let Some(e) = entry {
        if e.frames != frames.len() {
            log::warn!(
                "{}: manifest declares {} frames but file contains {}",
                path.display(),
                e.frames,
                frames.len()
            );
        }
    }
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sequence")
        .to_string();
    PressureSequence::new(
        frames,
        stem,
        entry.map(|e| e.class_label).unwrap_or(ActivityClass::Basic),
        entry.map(|e| e.description.clone()).unwrap_or_default(),
        entry.and_then(|e| e.subject_id.clone()),
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use tempfile::tempdir;

    fn tiny() -> PressureSequence {
        let frame = PressureFrame::new(arr2(&[[0.0f32, 1.0], [2.0, 3.0]])).unwrap();
        PressureSequence::new(
            vec![frame],
            "tiny".into(),
            ActivityClass::Basic,
            "a tiny test sequence".into(),
            None,
            false,
        )
        .unwrap()
    }

    #[test]
    fn encode_layout_is_exact() {
        let bytes = encode_sequence(&tiny()).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"PSEQ1");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        for v in [0.0f32, 1.0, 2.0, 3.0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.pseq");
        let seq = tiny();
        save_sequence(&seq, &path).unwrap();
        let back = load_sequence(&path).unwrap();
        assert_eq!(back.frames, seq.frames);
    }

    #[test]
    fn bad_magic_is_detected() {
        let mut bytes = encode_sequence(&tiny()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_sequence(&bytes), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let mut bytes = encode_sequence(&tiny()).unwrap();
        bytes.truncate(bytes.len() - 4);
        match decode_sequence(&bytes) {
            Err(DataError::Truncated { expected, got }) => {
                assert_eq!(expected, 16);
                assert_eq!(got, 12);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn declared_frames_beyond_payload_is_truncation() {
        // Header says T=10 but only 9 frames of payload follow.
        let seq = tiny();
        let mut bytes = encode_sequence(&seq).unwrap();
        bytes[5..9].copy_from_slice(&10u32.to_le_bytes());
        let nine_frames: Vec<u8> = std::iter::repeat(&bytes[13..29]).take(9).flatten().copied().collect();
        bytes.truncate(13);
        bytes.extend_from_slice(&nine_frames);
        assert!(matches!(decode_sequence(&bytes), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn nan_cell_writes_nothing() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.pseq");
        let frame = PressureFrame { grid: arr2(&[[f32::NAN]]) };
        let seq = PressureSequence {
            frames: vec![frame],
            activity_id: "nan".into(),
            class_label: ActivityClass::Basic,
            description: String::new(),
            subject_id: None,
            normalized: false,
        };
        assert!(save_sequence(&seq, &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn zero_dimension_header_is_dimension_mismatch() {
        let mut bytes = encode_sequence(&tiny()).unwrap();
        bytes[9..11].copy_from_slice(&0u16.to_le_bytes());
        assert!(matches!(
            decode_sequence(&bytes),
            Err(DataError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn metadata_comes_from_sibling_manifest() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.pseq");
        save_sequence(&tiny(), &path).unwrap();
        let manifest = DatasetManifest {
            entries: vec![ManifestEntry {
                path: "a.pseq".into(),
                description: "from manifest".into(),
                class_label: ActivityClass::Yoga,
                subject_id: Some("s1".into()),
                frames: 1,
            }],
            seed: 0,
            splits: None,
        };
        manifest.save(&dir.path().join("manifest.json")).unwrap();
        let seq = load_sequence(&path).unwrap();
        assert_eq!(seq.class_label, ActivityClass::Yoga);
        assert_eq!(seq.description, "from manifest");
        assert_eq!(seq.subject_id.as_deref(), Some("s1"));
    }
}
