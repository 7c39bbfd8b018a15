//! `pressgen train-generator`: fit the text-conditioned token model (or the
//! continuous-feature baseline) against a frozen codec.

use pressgen::checkpoint::file_sha256;
use pressgen::codec::{CodecCheckpoint, LossBreakdown};
use pressgen::generator::{train_baseline, train_generator, GeneratorTrainConfig};

use super::{load_manifest, load_normalized, require_artifact, write_loss_csv, EmbeddingSetup};
use crate::error::CliError;
use crate::runmeta::RunContext;

pub fn cmd_train_generator(ctx: &mut RunContext) -> Result<(), CliError> {
    let section = ctx
        .loaded
        .config
        .generator
        .clone()
        .ok_or_else(|| CliError::invalid("generator", "section missing from config"))?;

    let codec_path = ctx.loaded.resolve(&section.codec_checkpoint);
    require_artifact(&codec_path, "codec checkpoint")?;
    ctx.note_input(&codec_path)?;
    let codec = CodecCheckpoint::load(&codec_path)?;
    let codec_hash = file_sha256(&codec_path)?;

    let dataset_path = ctx.loaded.resolve(&section.dataset);
    let (manifest, dir) = load_manifest(&dataset_path, "training dataset manifest")?;
    ctx.note_input(&dataset_path)?;
    let sequences = load_normalized(&manifest, &dir, None)?;

    let embedding = EmbeddingSetup::from_config(&ctx.loaded.config.embedding.clone(), ctx)?;
    let mut model = section.model.clone();
    model.text_dim = ctx.loaded.config.embedding.dim;
    let mut pairs = Vec::with_capacity(sequences.len());
    for (entry, seq) in manifest.entries.iter().zip(sequences) {
        if entry.description.is_empty() {
            return Err(CliError::invalid(
                "generator.dataset",
                format!("entry {} has no description to condition on", entry.path),
            ));
        }
        pairs.push((embedding.embed(&entry.description)?, seq));
    }

    let cfg = GeneratorTrainConfig {
        model,
        learning_rate: section.learning_rate,
        lr_decay: section.lr_decay,
        steps: section.steps,
        batch_size: section.batch_size,
        seed: section.seed.unwrap_or(ctx.seed),
        stop_at_loss: section.stop_at_loss,
    };

    let ckpt_path = ctx.run_dir.join("generator.ckpt");
    let csv_path = ctx.run_dir.join("generator-loss.csv");
    let history = if section.baseline {
        let mut out = train_baseline(&pairs, &codec, &cfg).map_err(map_gen_error)?;
        out.checkpoint.codec_hash = Some(codec_hash);
        out.checkpoint.save(&ckpt_path)?;
        out.history
    } else {
        let mut out = train_generator(&pairs, &codec, &cfg).map_err(map_gen_error)?;
        out.checkpoint.codec_hash = Some(codec_hash);
        out.checkpoint.save(&ckpt_path)?;
        out.history
    };
    ctx.note_output(&ckpt_path);

    // same CSV layout as the codec: the generator has a single loss term
    let rows: Vec<LossBreakdown> = history
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossBreakdown {
            total: loss,
            reconstruction: loss,
            quantization: 0.0,
            w_r: 1.0,
            w_q: 0.0,
            step,
        })
        .collect();
    write_loss_csv(&csv_path, &rows)?;
    ctx.note_output(&csv_path);

    println!(
        "train-generator{}: {} steps, final loss {:.6}",
        if section.baseline { " (baseline)" } else { "" },
        history.len(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn map_gen_error(e: pressgen::generator::GeneratorError) -> CliError {
    match e {
        pressgen::generator::GeneratorError::InvalidConfig(msg) => {
            CliError::invalid("generator", msg)
        }
        other => CliError::internal(other.to_string()),
    }
}
