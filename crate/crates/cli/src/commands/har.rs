//! `pressgen har`: the downstream recognition experiment over training-set
//! recipes, with leakage checks before any training starts.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pressgen::data::PressureSequence;
use pressgen::har::{run_experiment, ExperimentData, HarTrainConfig, RecipeData};
use serde::Serialize;

use super::{load_manifest, load_normalized};
use crate::error::CliError;
use crate::runmeta::RunContext;

#[derive(Serialize)]
struct HarRunOutput {
    aggregates: Vec<pressgen::har::RecipeAggregate>,
    reports: Vec<pressgen::metrics::MetricReport>,
}

pub fn cmd_har(ctx: &mut RunContext) -> Result<(), CliError> {
    let section = ctx
        .loaded
        .config
        .har
        .clone()
        .ok_or_else(|| CliError::invalid("har", "section missing from config"))?;
    if section.recipes.is_empty() {
        return Err(CliError::invalid("har.recipes", "at least one recipe is required"));
    }
    if section.repetitions == 0 {
        return Err(CliError::invalid("har.repetitions", "must be >= 1"));
    }

    // load eval set first; sequence identity is the canonical file path
    let eval_path = resolve_manifest(ctx, &section.eval_manifest);
    let (eval_manifest, eval_dir) = load_manifest(&eval_path, "evaluation manifest")?;
    ctx.note_input(&eval_path)?;
    let eval = load_tagged(&eval_manifest, &eval_dir)?;
    let eval_ids: BTreeSet<String> = eval.iter().map(|s| s.activity_id.clone()).collect();

    let mut recipes = Vec::with_capacity(section.recipes.len());
    for recipe in &section.recipes {
        let mut sequences = Vec::new();
        for manifest_ref in &recipe.manifests {
            let path = resolve_manifest(ctx, manifest_ref);
            let (manifest, dir) = load_manifest(&path, "recipe manifest")?;
            ctx.note_input(&path)?;
            let seqs = load_tagged(&manifest, &dir)?;
            // leaked plan fails before any training
            let leaked: Vec<&String> = seqs
                .iter()
                .map(|s| &s.activity_id)
                .filter(|id| eval_ids.contains(*id))
                .collect();
            if !leaked.is_empty() {
                return Err(CliError::invalid(
                    "har.recipes",
                    format!(
                        "recipe {} shares {} sequence file(s) with the evaluation set, e.g. {}",
                        recipe.name,
                        leaked.len(),
                        leaked[0]
                    ),
                ));
            }
            sequences.extend(seqs);
        }
        recipes.push(RecipeData { name: recipe.name.clone(), sequences });
    }

    let base_seed = section.seed.unwrap_or(ctx.seed);
    let seeds = section
        .seeds
        .clone()
        .unwrap_or_else(|| (0..section.repetitions as u64).map(|i| base_seed + i).collect());
    if seeds.len() != section.repetitions {
        return Err(CliError::invalid(
            "har.seeds",
            format!("{} seeds for {} repetitions", seeds.len(), section.repetitions),
        ));
    }

    let plan = ExperimentData {
        recipes,
        eval,
        window_len: section.window_len,
        stride: section.stride,
        seeds,
        train: HarTrainConfig { ..section.train.clone() },
    };
    let outcome = run_experiment(&plan).map_err(|e| match e {
        pressgen::har::HarError::Leakage(ids) => {
            CliError::invalid("har", format!("leaked sequences: {ids:?}"))
        }
        pressgen::har::HarError::InvalidConfig(m) => CliError::invalid("har", m),
        other => CliError::internal(other.to_string()),
    })?;

    println!("recipe                         macro-F1");
    for agg in &outcome.aggregates {
        println!(
            "{:<30} {:.3} ± {:.3}  (n={})",
            agg.recipe, agg.mean_macro_f1, agg.std_macro_f1, agg.repetitions
        );
    }

    let out = HarRunOutput { aggregates: outcome.aggregates, reports: outcome.reports };
    let out_path = ctx.run_dir.join("har-reports.json");
    std::fs::write(&out_path, serde_json::to_string_pretty(&out)?)
        .map_err(|e| CliError::internal(format!("writing {}: {e}", out_path.display())))?;
    ctx.note_output(&out_path);
    Ok(())
}

fn resolve_manifest(ctx: &RunContext, configured: &str) -> PathBuf {
    let p = ctx.loaded.resolve(configured);
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p
    }
}

/// Load and normalize, rewriting each sequence id to its canonical file path
/// so identity survives across datasets with identical file stems.
fn load_tagged(
    manifest: &pressgen::data::DatasetManifest,
    dir: &std::path::Path,
) -> Result<Vec<PressureSequence>, CliError> {
    let mut seqs = load_normalized(manifest, dir, None)?;
    for (entry, seq) in manifest.entries.iter().zip(seqs.iter_mut()) {
        let full = dir.join(&entry.path);
        let canonical = full.canonicalize().unwrap_or(full);
        seq.activity_id = canonical.display().to_string();
    }
    Ok(seqs)
}
