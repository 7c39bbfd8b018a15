//! The six pipeline commands plus shared helpers.

mod evaluate;
mod generate;
mod har;
mod synth;
mod train_codec;
mod train_generator;

pub use evaluate::cmd_evaluate;
pub use generate::cmd_generate;
pub use har::cmd_har;
pub use synth::cmd_synth;
pub use train_codec::cmd_train_codec;
pub use train_generator::cmd_train_generator;

use std::path::{Path, PathBuf};

use pressgen::codec::LossBreakdown;
use pressgen::data::{normalize, DatasetManifest, PressureSequence, Split};
use pressgen::embed::{
    embed, EmbeddingCache, EmbeddingProvider, FallbackProvider, RemoteProvider, TextEmbedding,
};

use crate::config::{EmbeddingSection, ProviderKind};
use crate::error::CliError;
use crate::runmeta::RunContext;

/// A file a command depends on; absence is exit code 4.
pub(crate) fn require_artifact(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact { what: what.to_string(), path: path.to_path_buf() })
    }
}

/// Load a dataset manifest; returns the manifest and the directory entries
/// resolve against.
pub(crate) fn load_manifest(path: &Path, what: &str) -> Result<(DatasetManifest, PathBuf), CliError> {
    require_artifact(path, what)?;
    let manifest = DatasetManifest::load(path)
        .map_err(|e| CliError::internal(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, dir))
}

/// Load sequences of one split (or all), normalized for model consumption.
pub(crate) fn load_normalized(
    manifest: &DatasetManifest,
    dir: &Path,
    split: Option<Split>,
) -> Result<Vec<PressureSequence>, CliError> {
    let raw = manifest
        .load_sequences(dir, split)
        .map_err(|e| CliError::internal(e.to_string()))?;
    raw.iter()
        .map(|s| normalize(s).map_err(CliError::from))
        .collect()
}

pub(crate) struct EmbeddingSetup {
    provider: Box<dyn EmbeddingProvider>,
    fallback: FallbackProvider,
    cache: Option<EmbeddingCache>,
}

impl EmbeddingSetup {
    /// Build the configured provider. Secrets come from the environment:
    /// `PRESSGEN_EMBED_URL` and `PRESSGEN_EMBED_API_KEY` override the config.
    pub(crate) fn from_config(
        section: &EmbeddingSection,
        ctx: &RunContext,
    ) -> Result<Self, CliError> {
        let cache = match &section.cache_dir {
            Some(dir) => Some(
                EmbeddingCache::new(&ctx.loaded.resolve(dir))
                    .map_err(|e| CliError::internal(e.to_string()))?,
            ),
            None => None,
        };
        let provider: Box<dyn EmbeddingProvider> = match section.provider {
            ProviderKind::Fallback => Box::new(FallbackProvider::new(section.dim)),
            ProviderKind::Remote => {
                let url = std::env::var("PRESSGEN_EMBED_URL").ok().or_else(|| {
                    section.remote.as_ref().and_then(|r| r.base_url.clone())
                });
                let url = url.ok_or_else(|| {
                    CliError::invalid(
                        "embedding.remote.base_url",
                        "remote provider selected but no URL configured",
                    )
                })?;
                let timeout = std::time::Duration::from_millis(
                    section.remote.as_ref().map(|r| r.timeout_ms).unwrap_or(5000),
                );
                let api_key = std::env::var("PRESSGEN_EMBED_API_KEY").ok();
                Box::new(RemoteProvider::new(url, section.dim, timeout, api_key))
            }
        };
        Ok(EmbeddingSetup {
            provider,
            fallback: FallbackProvider::new(section.dim),
            cache,
        })
    }

    /// Embed through the configured provider; remote failures degrade to the
    /// offline fallback with a warning instead of aborting the pipeline.
    pub(crate) fn embed(&self, text: &str) -> Result<TextEmbedding, CliError> {
        match embed(text, self.provider.as_ref(), self.cache.as_ref()) {
            Ok(e) => Ok(e),
            Err(pressgen::embed::EmbedError::EmptyText) => {
                Err(CliError::invalid("text", "prompts must be non-empty"))
            }
            Err(remote_err) => {
                log::warn!("remote embedding failed ({remote_err}); using offline fallback");
                embed(text, &self.fallback, self.cache.as_ref()).map_err(CliError::from)
            }
        }
    }
}

/// Loss history CSV with the column layout shared by both trainers.
pub(crate) fn write_loss_csv(path: &Path, history: &[LossBreakdown]) -> Result<(), CliError> {
    let mut out = String::from("step,L_r,L_q,w_r,w_q,total\n");
    for b in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.step, b.reconstruction, b.quantization, b.w_r, b.w_q, b.total
        ));
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::internal(format!("writing {}: {e}", path.display())))
}

/// Render one normalized frame as a small heatmap PNG.
pub(crate) fn render_heatmap(grid: &ndarray::Array2<f32>, path: &Path) -> Result<(), CliError> {
    let (h, w) = grid.dim();
    let scale = 4u32;
    let mut img = image::RgbImage::new(w as u32 * scale, h as u32 * scale);
    for (px, py, pixel) in img.enumerate_pixels_mut() {
        let col = ((px / scale) as usize).min(w - 1);
        let row = ((py / scale) as usize).min(h - 1);
        let v = grid[[row, col]].clamp(0.0, 1.0);
        *pixel = image::Rgb(colormap(v));
    }
    img.save(path)
        .map_err(|e| CliError::internal(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

/// Dark-blue to yellow ramp, good enough for contact inspection.
fn colormap(v: f32) -> [u8; 3] {
    let stops: [(f32, [f32; 3]); 5] = [
        (0.0, [13.0, 8.0, 135.0]),
        (0.25, [126.0, 3.0, 168.0]),
        (0.5, [204.0, 71.0, 120.0]),
        (0.75, [248.0, 149.0, 64.0]),
        (1.0, [240.0, 249.0, 33.0]),
    ];
    let v = v.clamp(0.0, 1.0);
    for pair in stops.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = if b > a { (v - a) / (b - a) } else { 0.0 };
            return [
                (ca[0] + t * (cb[0] - ca[0])) as u8,
                (ca[1] + t * (cb[1] - ca[1])) as u8,
                (ca[2] + t * (cb[2] - ca[2])) as u8,
            ];
        }
    }
    [240, 249, 33]
}
