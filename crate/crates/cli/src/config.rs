//! The single JSON run configuration.
//!
//! One document carries a section per pipeline stage; each command validates
//! only the section it needs before doing any work. Relative paths resolve
//! against the directory containing the config file. Environment variables
//! override only the embedding-service secrets (`PRESSGEN_EMBED_URL`,
//! `PRESSGEN_EMBED_API_KEY`).

use std::path::{Path, PathBuf};

use pressgen::codec::{AnnealSchedule, CodecGeometry};
use pressgen::data::{ActivityClass, SensorNoise};
use pressgen::generator::{GeneratorConfig, Sampling};
use pressgen::har::HarTrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; sections without their own seed inherit it.
    #[serde(default)]
    pub seed: u64,
    /// Where checkpoints, logs and reports land; overridable by `--run-dir`.
    pub run_dir: Option<String>,
    pub synth: Option<SynthSection>,
    pub codec: Option<CodecSection>,
    pub generator: Option<GeneratorSection>,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    pub generate: Option<GenerateSection>,
    pub evaluate: Option<EvaluateSection>,
    pub har: Option<HarSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub out_dir: String,
    pub sequences_per_class: usize,
    #[serde(default = "default_frames")]
    pub frames_per_sequence: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    pub seed: Option<u64>,
    pub classes: Option<Vec<ActivityClass>>,
    #[serde(default)]
    pub templates: std::collections::BTreeMap<String, pressgen::data::ClassTemplate>,
    pub noise: Option<SensorNoise>,
    /// Optional post-synth split assignment.
    pub split: Option<SplitSection>,
}

fn default_frames() -> usize {
    120
}
fn default_height() -> usize {
    pressgen::data::CANONICAL_HEIGHT
}
fn default_width() -> usize {
    pressgen::data::CANONICAL_WIDTH
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub test: f64,
    pub val: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    /// Dataset manifest to train on.
    pub dataset: String,
    #[serde(default)]
    pub geometry: CodecGeometry,
    #[serde(default)]
    pub schedule: AnnealSchedule,
    #[serde(default = "default_true")]
    pub use_ema: bool,
    #[serde(default = "default_ema_horizon")]
    pub ema_horizon: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_codec_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
    /// K-fold cross-validation mode; per-fold checkpoints are written and
    /// the best fold becomes the main checkpoint.
    pub folds: Option<usize>,
}

fn default_true() -> bool {
    true
}
fn default_ema_horizon() -> usize {
    99
}
fn default_lr() -> f64 {
    1e-3
}
fn default_lr_decay() -> f64 {
    0.999
}
fn default_codec_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    4
}
fn default_eval_every() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub dataset: String,
    pub codec_checkpoint: String,
    #[serde(default)]
    pub model: GeneratorConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_gen_steps")]
    pub steps: usize,
    #[serde(default = "default_gen_batch")]
    pub batch_size: usize,
    pub stop_at_loss: Option<f64>,
    pub seed: Option<u64>,
    /// Train the continuous-feature baseline instead of the token model.
    #[serde(default)]
    pub baseline: bool,
}

fn default_gen_steps() -> usize {
    1000
}
fn default_gen_batch() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    #[serde(default)]
    pub provider: ProviderKind,
    #[serde(default = "default_text_dim")]
    pub dim: usize,
    pub cache_dir: Option<String>,
    pub remote: Option<RemoteSection>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            provider: ProviderKind::Fallback,
            dim: default_text_dim(),
            cache_dir: None,
            remote: None,
        }
    }
}

fn default_text_dim() -> usize {
    pressgen::embed::DEFAULT_TEXT_DIM
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Fallback,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub base_url: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    5000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub generator_checkpoint: String,
    pub codec_checkpoint: String,
    /// Literal prompts; mutually exclusive with `texts_from`.
    pub texts: Option<Vec<String>>,
    /// Take prompts (and class labels) from a dataset manifest.
    pub texts_from: Option<String>,
    #[serde(default = "default_frames")]
    pub target_frames: usize,
    #[serde(default = "default_samples_per_text")]
    pub samples_per_text: usize,
    pub sampling: Option<Sampling>,
    pub seed: Option<u64>,
    #[serde(default = "default_out_name")]
    pub out_dir: String,
}

fn default_samples_per_text() -> usize {
    1
}
fn default_out_name() -> String {
    "generated".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    /// Reference (real) dataset manifest.
    pub reference: String,
    /// Generated dataset manifest (or its directory).
    pub generated: String,
    #[serde(default)]
    pub feature_space: FeatureSpaceKind,
    #[serde(default = "default_pca_components")]
    pub pca_components: usize,
    /// Needed when `feature_space` is `codec-latent`.
    pub codec_checkpoint: Option<String>,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_pca_components() -> usize {
    64
}
fn default_tau() -> f64 {
    pressgen::metrics::DEFAULT_CONTACT_TAU
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSpaceKind {
    #[default]
    CodecLatent,
    PcaFlat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarSection {
    pub recipes: Vec<RecipeSection>,
    pub eval_manifest: String,
    #[serde(default = "default_window")]
    pub window_len: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    /// Explicit per-repetition seeds; derived from the global seed when
    /// absent.
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub train: HarTrainConfig,
    pub seed: Option<u64>,
}

fn default_window() -> usize {
    32
}
fn default_stride() -> usize {
    16
}
fn default_reps() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSection {
    pub name: String,
    pub manifests: Vec<String>,
}

/// A parsed config plus everything needed to resolve paths and reproduce the
/// exact input bytes.
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Byte-exact snapshot of the config file.
    pub raw: String,
    pub path: PathBuf,
    base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::MissingFile { path: path.to_path_buf() });
        }
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::internal(format!("reading {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| CliError::invalid("config", e))?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(LoadedConfig { config, raw, path: path.to_path_buf(), base_dir })
    }

    /// Resolve a config-relative path.
    pub fn resolve(&self, p: &str) -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            self.base_dir.join(pb)
        }
    }
}
