//! Per-run provenance: which command ran, the exact config bytes, input
//! hashes, produced artifacts, wall-clock timing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;
use crate::error::CliError;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    /// Byte-identical copy of the input config.
    pub config_snapshot: String,
    pub input_hashes: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings: Timings,
    pub tool_version: String,
}

#[derive(Serialize)]
pub struct Timings {
    pub total_seconds: f64,
}

/// Mutable state threaded through one command invocation.
pub struct RunContext {
    pub loaded: LoadedConfig,
    pub run_dir: PathBuf,
    pub seed: u64,
    start: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunContext {
    pub fn new(
        config_path: &Path,
        run_dir_flag: Option<&Path>,
        seed_flag: Option<u64>,
    ) -> Result<Self, CliError> {
        let loaded = LoadedConfig::load(config_path)?;
        let run_dir = match run_dir_flag {
            Some(p) => p.to_path_buf(),
            None => match &loaded.config.run_dir {
                Some(p) => loaded.resolve(p),
                None => loaded.resolve("run"),
            },
        };
        std::fs::create_dir_all(&run_dir)
            .map_err(|e| CliError::internal(format!("creating {}: {e}", run_dir.display())))?;
        let seed = seed_flag.unwrap_or(loaded.config.seed);
        let mut ctx = RunContext {
            loaded,
            run_dir,
            seed,
            start: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        };
        let config_path = ctx.loaded.path.clone();
        ctx.note_input(&config_path)?;
        Ok(ctx)
    }

    /// Record (and hash) a file the command reads.
    pub fn note_input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::internal(format!("hashing {}: {e}", path.display())))?;
        self.inputs.insert(
            path.display().to_string(),
            hex::encode(Sha256::digest(&bytes)),
        );
        Ok(())
    }

    pub fn note_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Write `run-manifest-<command>.json` atomically (temp file + rename).
    pub fn write_manifest(self, command: &str) -> Result<PathBuf, CliError> {
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: self.loaded.path.display().to_string(),
            config_snapshot: self.loaded.raw.clone(),
            input_hashes: self.inputs,
            outputs: self.outputs,
            timings: Timings { total_seconds: self.start.elapsed().as_secs_f64() },
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let final_path = self.run_dir.join(format!("run-manifest-{command}.json"));
        let tmp_path = self.run_dir.join(format!(".run-manifest-{command}.json.tmp"));
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&tmp_path, json)
            .map_err(|e| CliError::internal(format!("writing {}: {e}", tmp_path.display())))?;
        std::fs::rename(&tmp_path, &final_path)
            .map_err(|e| CliError::internal(format!("renaming run manifest: {e}")))?;
        Ok(final_path)
    }
}
