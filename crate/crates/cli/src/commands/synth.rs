//! `pressgen synth`: procedural dataset synthesis plus optional splitting.

use pressgen::data::{split_dataset, synth_dataset, ActivityClass, SplitFractions, SynthConfig};

use crate::error::CliError;
use crate::runmeta::RunContext;

pub fn cmd_synth(ctx: &mut RunContext) -> Result<(), CliError> {
    let section = ctx
        .loaded
        .config
        .synth
        .clone()
        .ok_or_else(|| CliError::invalid("synth", "section missing from config"))?;

    let cfg = SynthConfig {
        sequences_per_class: section.sequences_per_class,
        frames_per_sequence: section.frames_per_sequence,
        height: section.height,
        width: section.width,
        seed: section.seed.unwrap_or(ctx.seed),
        classes: section.classes.clone().unwrap_or_else(|| ActivityClass::ALL.to_vec()),
        templates: section.templates.clone(),
        noise: section.noise.clone(),
    };
    cfg.validate().map_err(|e| CliError::invalid("synth", e))?;

    let out_dir = ctx.loaded.resolve(&section.out_dir);
    let mut manifest = synth_dataset(&cfg, &out_dir)?;
    log::info!(
        "synthesized {} sequences / {} frames into {}",
        manifest.total_sequences(),
        manifest.total_frames(),
        out_dir.display()
    );

    if let Some(split) = &section.split {
        let fractions = SplitFractions { train: split.train, test: split.test, val: split.val };
        manifest = split_dataset(&manifest, fractions, split.seed.unwrap_or(ctx.seed))
            .map_err(|e| CliError::invalid("synth.split", e))?;
        manifest
            .save(&out_dir.join("manifest.json"))
            .map_err(|e| CliError::internal(e.to_string()))?;
    }

    for entry in &manifest.entries {
        ctx.note_output(&out_dir.join(&entry.path));
    }
    ctx.note_output(&out_dir.join("manifest.json"));
    println!(
        "synth: {} sequences, {} frames -> {}",
        manifest.total_sequences(),
        manifest.total_frames(),
        out_dir.display()
    );
    Ok(())
}
