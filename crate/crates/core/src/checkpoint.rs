//! Versioned binary container for model checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "PGCK1"         5 bytes
//! format version        u32   (currently 1)
//! kind                  u8    (0 codec, 1 generator, 2 har)
//! meta length           u32, then that many bytes of JSON
//! blob count            u32
//! per blob: name length u16, name bytes,
//!           ndim        u8,  dims (u32 each),
//!           values      f64 per element
//! ```
//!
//! Writing is deterministic: metadata comes from typed structs (fixed field
//! order) and blobs are stored in parameter registration order, so two
//! checkpoints of identical training runs are byte-identical. The content
//! hash of the file is used to pair a generator with the codec it was
//! trained against.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use sha2::{Digest, Sha256};
use thiserror::Error;

const MAGIC: &[u8; 5] = b"PGCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {got} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { got: u32 },
    #[error("unknown checkpoint kind {0}")]
    UnknownKind(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Codec,
    Generator,
    Har,
}

impl CheckpointKind {
    fn to_byte(self) -> u8 {
        match self {
            CheckpointKind::Codec => 0,
            CheckpointKind::Generator => 1,
            CheckpointKind::Har => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self, CheckpointError> {
        match b {
            0 => Ok(CheckpointKind::Codec),
            1 => Ok(CheckpointKind::Generator),
            2 => Ok(CheckpointKind::Har),
            other => Err(CheckpointError::UnknownKind(other)),
        }
    }
}

/// A checkpoint as raw parts: kind, JSON metadata, named arrays.
pub struct CheckpointData {
    pub kind: CheckpointKind,
    pub meta: serde_json::Value,
    pub blobs: Vec<(String, ArrayD<f64>)>,
}

pub fn encode(data: &CheckpointData) -> Result<Vec<u8>, CheckpointError> {
    let meta = serde_json::to_vec(&data.meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(data.kind.to_byte());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(data.blobs.len() as u32).to_le_bytes());
    for (name, arr) in &data.blobs {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(arr.ndim() as u8);
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, data: &CheckpointData) -> Result<(), CheckpointError> {
    let bytes = encode(data)?;
    fs::write(path, bytes).map_err(|e| CheckpointError::Io { path: path.into(), source: e })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "unexpected end of file at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { got: version });
    }
    let kind = CheckpointKind::from_byte(r.u8()?)?;
    let meta_len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)?;
    let blob_count = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(blob_count);
    for _ in 0..blob_count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("blob name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        let arr = ArrayD::from_shape_vec(dims, values)
            .map_err(|e| CheckpointError::Corrupt(format!("blob {name}: {e}")))?;
        blobs.push((name, arr));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(CheckpointData { kind, meta, blobs })
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData, CheckpointError> {
    let bytes =
        fs::read(path).map_err(|e| CheckpointError::Io { path: path.into(), source: e })?;
    decode(&bytes)
}

/// SHA-256 of a file, hex-encoded; used to couple generator and codec
/// checkpoints.
pub fn file_sha256(path: &Path) -> Result<String, CheckpointError> {
    let bytes =
        fs::read(path).map_err(|e| CheckpointError::Io { path: path.into(), source: e })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample() -> CheckpointData {
        CheckpointData {
            kind: CheckpointKind::Codec,
            meta: serde_json::json!({"h": 4, "w": 2}),
            blobs: vec![
                ("enc.w".into(), arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn()),
                ("enc.b".into(), ndarray::arr1(&[0.5]).into_dyn()),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let bytes = encode(&sample()).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back.kind, CheckpointKind::Codec);
        assert_eq!(back.meta["h"], 4);
        assert_eq!(back.blobs.len(), 2);
        assert_eq!(back.blobs[0].0, "enc.w");
        assert_eq!(back.blobs[0].1, sample().blobs[0].1);
    }

    #[test]
    fn version_mismatch_is_an_error() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[5..9].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::UnsupportedVersion { got: 99 })
        ));
    }

    #[test]
    fn corrupt_tail_is_detected() {
        let mut bytes = encode(&sample()).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(CheckpointError::Corrupt(_))));
        let mut extended = encode(&sample()).unwrap();
        extended.push(0);
        assert!(matches!(decode(&extended), Err(CheckpointError::Corrupt(_))));
    }
}
