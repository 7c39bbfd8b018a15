//! `pressgen train-codec`: fit the vector-quantized autoencoder.

use pressgen::codec::{train_codec, train_codec_kfold, CodecTrainConfig, CodecTrainOutcome};
use pressgen::data::{PressureSequence, Split};

use super::{load_manifest, load_normalized, write_loss_csv};
use crate::error::CliError;
use crate::runmeta::RunContext;

pub fn cmd_train_codec(ctx: &mut RunContext) -> Result<(), CliError> {
    let section = ctx
        .loaded
        .config
        .codec
        .clone()
        .ok_or_else(|| CliError::invalid("codec", "section missing from config"))?;

    let dataset_path = ctx.loaded.resolve(&section.dataset);
    let (manifest, dir) = load_manifest(&dataset_path, "training dataset manifest")?;
    ctx.note_input(&dataset_path)?;

    let cfg = CodecTrainConfig {
        geometry: section.geometry,
        schedule: section.schedule,
        use_ema: section.use_ema,
        ema_horizon: section.ema_horizon,
        learning_rate: section.learning_rate,
        lr_decay: section.lr_decay,
        steps: section.steps,
        batch_size: section.batch_size,
        seed: section.seed.unwrap_or(ctx.seed),
        eval_every: section.eval_every,
        patience: section.patience,
    };

    if let Some(folds) = section.folds {
        let all = load_normalized(&manifest, &dir, None)?;
        let outcomes = train_codec_kfold(&all, &cfg, folds)
            .map_err(|e| map_train_error(e, "codec"))?;
        let mut best: Option<(usize, f64)> = None;
        for (i, out) in outcomes.iter().enumerate() {
            let ckpt_path = ctx.run_dir.join(format!("codec-fold-{i}.ckpt"));
            out.checkpoint.save(&ckpt_path)?;
            ctx.note_output(&ckpt_path);
            let csv_path = ctx.run_dir.join(format!("codec-loss-fold-{i}.csv"));
            write_loss_csv(&csv_path, &out.history)?;
            ctx.note_output(&csv_path);
            println!("fold {i}: best validation MSE {:.6}", out.best_val_mse);
            if best.map(|(_, b)| out.best_val_mse < b).unwrap_or(true) {
                best = Some((i, out.best_val_mse));
            }
        }
        let (best_i, best_mse) = best.expect("at least one fold");
        let main_path = ctx.run_dir.join("codec.ckpt");
        outcomes[best_i].checkpoint.save(&main_path)?;
        ctx.note_output(&main_path);
        println!("train-codec: {folds} folds, best fold {best_i} (val MSE {best_mse:.6})");
        return Ok(());
    }

    let (train, val) = split_train_val(&manifest, &dir, cfg.seed)?;
    let outcome: CodecTrainOutcome =
        train_codec(&train, &val, &cfg).map_err(|e| map_train_error(e, "codec"))?;

    let ckpt_path = ctx.run_dir.join("codec.ckpt");
    outcome.checkpoint.save(&ckpt_path)?;
    ctx.note_output(&ckpt_path);
    let csv_path = ctx.run_dir.join("codec-loss.csv");
    write_loss_csv(&csv_path, &outcome.history)?;
    ctx.note_output(&csv_path);

    let final_recon = outcome.history.last().map(|b| b.reconstruction).unwrap_or(f64::NAN);
    println!(
        "train-codec: {} steps, final L_r {:.6}, best val MSE {:.6}",
        outcome.history.len(),
        final_recon,
        outcome.best_val_mse
    );
    Ok(())
}

/// Use the manifest's recorded splits when present, otherwise carve a tenth
/// (at least one sequence) off deterministically.
fn split_train_val(
    manifest: &pressgen::data::DatasetManifest,
    dir: &std::path::Path,
    seed: u64,
) -> Result<(Vec<PressureSequence>, Vec<PressureSequence>), CliError> {
    if manifest.splits.is_some() {
        let train = load_normalized(manifest, dir, Some(Split::Train))?;
        let val = load_normalized(manifest, dir, Some(Split::Val))?;
        if !train.is_empty() {
            return Ok((train, val));
        }
    }
    let mut all = load_normalized(manifest, dir, None)?;
    if all.len() < 2 {
        return Ok((all, Vec::new()));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x76a1));
    let n_val = (all.len() / 10).max(1);
    let val_set: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, seq) in all.drain(..).enumerate() {
        if val_set.contains(&i) {
            val.push(seq);
        } else {
            train.push(seq);
        }
    }
    Ok((train, val))
}

pub(super) fn map_train_error(e: pressgen::codec::CodecError, section: &str) -> CliError {
    match e {
        pressgen::codec::CodecError::InvalidConfig(msg) => CliError::invalid(section, msg),
        other => CliError::internal(other.to_string()),
    }
}
