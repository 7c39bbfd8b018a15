//! `pressgen generate`: text prompts to `PSEQ1` files through the trained
//! generator and codec, with an index JSON mapping each prompt to its file.

use std::path::Path;

use pressgen::checkpoint::file_sha256;
use pressgen::codec::CodecCheckpoint;
use pressgen::data::{denormalize, save_sequence, ActivityClass, DatasetManifest, ManifestEntry};
use pressgen::generator::{
    detokenize, generate, generate_baseline, BaselineCheckpoint, GeneratorCheckpoint,
    GeneratorConfig,
};
use serde::Serialize;

use super::{load_manifest, render_heatmap, require_artifact, EmbeddingSetup};
use crate::error::CliError;
use crate::runmeta::RunContext;

#[derive(Serialize)]
struct IndexEntry {
    text: String,
    path: String,
    frames: usize,
    sample: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_label: Option<ActivityClass>,
}

#[derive(Serialize)]
struct GenerationIndex {
    entries: Vec<IndexEntry>,
    generator_checkpoint: String,
    codec_checkpoint: String,
    seed: u64,
}

enum LoadedGenerator {
    Discrete(GeneratorCheckpoint),
    Baseline(BaselineCheckpoint),
}

pub fn cmd_generate(ctx: &mut RunContext, texts_flag: &[String], plot: bool) -> Result<(), CliError> {
    let section = ctx
        .loaded
        .config
        .generate
        .clone()
        .ok_or_else(|| CliError::invalid("generate", "section missing from config"))?;

    let codec_path = ctx.loaded.resolve(&section.codec_checkpoint);
    require_artifact(&codec_path, "codec checkpoint")?;
    let generator_path = ctx.loaded.resolve(&section.generator_checkpoint);
    require_artifact(&generator_path, "generator checkpoint")?;
    ctx.note_input(&codec_path)?;
    ctx.note_input(&generator_path)?;

    let codec = CodecCheckpoint::load(&codec_path)?;
    let generator = match GeneratorCheckpoint::load(&generator_path) {
        Ok(g) => LoadedGenerator::Discrete(g),
        Err(_) => LoadedGenerator::Baseline(BaselineCheckpoint::load(&generator_path)?),
    };

    // the generator must have been trained against exactly this codec file
    let codec_hash = file_sha256(&codec_path)?;
    let recorded = match &generator {
        LoadedGenerator::Discrete(g) => g.codec_hash.clone(),
        LoadedGenerator::Baseline(b) => b.codec_hash.clone(),
    };
    match recorded {
        Some(h) if h == codec_hash => {}
        Some(h) => {
            return Err(CliError::ArtifactMismatch {
                message: format!(
                    "generator was trained against codec {h}, but {} hashes to {codec_hash}",
                    codec_path.display()
                ),
            });
        }
        None => log::warn!("generator checkpoint records no codec hash; skipping the match check"),
    }

    // prompts: --text flags beat config texts beat a manifest of descriptions
    let mut prompts: Vec<(String, Option<ActivityClass>)> = Vec::new();
    if !texts_flag.is_empty() {
        prompts.extend(texts_flag.iter().map(|t| (t.clone(), None)));
    } else if let Some(texts) = &section.texts {
        prompts.extend(texts.iter().map(|t| (t.clone(), None)));
    } else if let Some(from) = &section.texts_from {
        let path = ctx.loaded.resolve(from);
        let (manifest, _) = load_manifest(&path, "prompt manifest")?;
        ctx.note_input(&path)?;
        prompts.extend(
            manifest
                .entries
                .iter()
                .map(|e| (e.description.clone(), Some(e.class_label))),
        );
    }
    if prompts.is_empty() {
        return Err(CliError::invalid(
            "generate.texts",
            "no prompts: provide --text, texts, or texts_from",
        ));
    }

    let embedding = EmbeddingSetup::from_config(&ctx.loaded.config.embedding.clone(), ctx)?;
    let out_dir = ctx.run_dir.join(&section.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::internal(format!("creating {}: {e}", out_dir.display())))?;

    let base_seed = section.seed.unwrap_or(ctx.seed);
    let mut index_entries = Vec::new();
    let mut manifest_entries = Vec::new();
    for (ti, (text, class)) in prompts.iter().enumerate() {
        let cond = embedding.embed(text)?;
        for sample in 0..section.samples_per_text {
            let sample_seed = base_seed
                .wrapping_add(ti as u64)
                .wrapping_mul(1_000_003)
                .wrapping_add(sample as u64);
            let mut seq = match &generator {
                LoadedGenerator::Discrete(g) => {
                    let mut cfg: GeneratorConfig = g.config().clone();
                    if let Some(s) = &section.sampling {
                        cfg.sampling = *s;
                    }
                    cfg.seed = sample_seed;
                    let tokens = generate(&cond, &cfg, g)?;
                    let l = codec.geometry().downsample;
                    let available = tokens.indices().len() * l;
                    let target = section.target_frames.min(available.max(1));
                    detokenize(&tokens, &codec, Some(target))?
                }
                LoadedGenerator::Baseline(b) => {
                    let l = codec.geometry().downsample;
                    let steps = section.target_frames.div_ceil(l).max(1);
                    let lat = generate_baseline(&cond, steps, l, b)?;
                    let mut s = codec.decode(&lat)?;
                    s.frames.truncate(section.target_frames);
                    s
                }
            };
            seq.description = text.clone();
            if let Some(c) = class {
                seq.class_label = *c;
            }
            seq.activity_id = format!("gen-{ti:03}-{sample:02}");
            let raw = denormalize(&seq)?;

            let file = format!("{}.pseq", raw.activity_id);
            let path = out_dir.join(&file);
            save_sequence(&raw, &path)?;
            ctx.note_output(&path);

            if plot {
                let plot_dir = out_dir.join("plots").join(&seq.activity_id);
                std::fs::create_dir_all(&plot_dir)
                    .map_err(|e| CliError::internal(e.to_string()))?;
                for (fi, frame) in seq.frames.iter().enumerate() {
                    render_heatmap(frame.grid(), &plot_dir.join(format!("frame_{fi:04}.png")))?;
                }
            }

            index_entries.push(IndexEntry {
                text: text.clone(),
                path: file.clone(),
                frames: raw.len(),
                sample,
                class_label: *class,
            });
            manifest_entries.push(ManifestEntry {
                path: file,
                description: text.clone(),
                class_label: class.unwrap_or(ActivityClass::Basic),
                subject_id: None,
                frames: raw.len(),
            });
        }
    }

    // a generated directory doubles as a normal dataset: manifest + index
    let manifest = DatasetManifest { entries: manifest_entries, seed: base_seed, splits: None };
    manifest
        .save(&out_dir.join("manifest.json"))
        .map_err(|e| CliError::internal(e.to_string()))?;
    ctx.note_output(&out_dir.join("manifest.json"));

    let index = GenerationIndex {
        entries: index_entries,
        generator_checkpoint: generator_path.display().to_string(),
        codec_checkpoint: codec_path.display().to_string(),
        seed: base_seed,
    };
    write_index(&out_dir.join("index.json"), &index)?;
    ctx.note_output(&out_dir.join("index.json"));

    println!(
        "generate: {} prompts x {} samples -> {}",
        prompts.len(),
        section.samples_per_text,
        out_dir.display()
    );
    Ok(())
}

fn write_index(path: &Path, index: &GenerationIndex) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(index)?;
    std::fs::write(path, json)
        .map_err(|e| CliError::internal(format!("writing {}: {e}", path.display())))
}
