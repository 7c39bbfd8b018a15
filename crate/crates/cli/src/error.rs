//! Stable exit codes and machine-readable error output.
//!
//! Scripts keying off this tool rely on: 2 = missing file, 3 = invalid
//! config, 4 = missing upstream artifact, 5 = artifact mismatch, 1 =
//! anything else. Every failure prints a single-line JSON object on stderr.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing file: {}", path.display())]
    MissingFile { path: PathBuf },
    #[error("invalid config field {field}: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("missing {what}: {}", path.display())]
    MissingArtifact { what: String, path: PathBuf },
    #[error("artifact mismatch: {message}")]
    ArtifactMismatch { message: String },
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn invalid(field: &str, message: impl std::fmt::Display) -> Self {
        CliError::InvalidConfig { field: field.to_string(), message: message.to_string() }
    }

    pub fn internal(message: impl std::fmt::Display) -> Self {
        CliError::Internal(message.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile { .. } => 2,
            CliError::InvalidConfig { .. } => 3,
            CliError::MissingArtifact { .. } => 4,
            CliError::ArtifactMismatch { .. } => 5,
            CliError::Internal(_) => 1,
        }
    }

    /// Single-line JSON for stderr.
    pub fn to_json(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("error".into(), serde_json::Value::String(self.to_string()));
        obj.insert("code".into(), serde_json::Value::from(self.exit_code()));
        match self {
            CliError::MissingFile { path } | CliError::MissingArtifact { path, .. } => {
                obj.insert(
                    "path".into(),
                    serde_json::Value::String(path.display().to_string()),
                );
            }
            CliError::InvalidConfig { field, .. } => {
                obj.insert("field".into(), serde_json::Value::String(field.clone()));
            }
            _ => {}
        }
        serde_json::Value::Object(obj).to_string()
    }
}

impl From<pressgen::data::DataError> for CliError {
    fn from(e: pressgen::data::DataError) -> Self {
        match e {
            pressgen::data::DataError::InvalidConfig(msg) => {
                CliError::InvalidConfig { field: "config".into(), message: msg }
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<pressgen::codec::CodecError> for CliError {
    fn from(e: pressgen::codec::CodecError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<pressgen::generator::GeneratorError> for CliError {
    fn from(e: pressgen::generator::GeneratorError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<pressgen::har::HarError> for CliError {
    fn from(e: pressgen::har::HarError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<pressgen::metrics::MetricsError> for CliError {
    fn from(e: pressgen::metrics::MetricsError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<pressgen::checkpoint::CheckpointError> for CliError {
    fn from(e: pressgen::checkpoint::CheckpointError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<pressgen::embed::EmbedError> for CliError {
    fn from(e: pressgen::embed::EmbedError) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(CliError::MissingFile { path: "x".into() }.exit_code(), 2);
        assert_eq!(CliError::invalid("synth", "bad").exit_code(), 3);
        assert_eq!(
            CliError::MissingArtifact { what: "codec checkpoint".into(), path: "c".into() }
                .exit_code(),
            4
        );
        assert_eq!(
            CliError::ArtifactMismatch { message: "hash".into() }.exit_code(),
            5
        );
        assert_eq!(CliError::internal("boom").exit_code(), 1);
    }

    #[test]
    fn json_is_single_line_and_names_the_culprit() {
        let e = CliError::MissingFile { path: "conf.json".into() };
        let json = e.to_json();
        assert!(!json.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["code"], 2);
        assert_eq!(v["path"], "conf.json");

        let e = CliError::invalid("codec.steps", "must be positive");
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["field"], "codec.steps");
    }
}
