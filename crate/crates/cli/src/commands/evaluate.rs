//! `pressgen evaluate`: FID, R², and binarized R² of a generated set against
//! a reference set, written as a `MetricReport` with full configuration.

use pressgen::codec::CodecCheckpoint;
use pressgen::metrics::{binarized_r2, fid, r2, FeatureSpace, MetricReport, MetricReportConfig};

use super::{load_manifest, load_normalized, require_artifact};
use crate::config::FeatureSpaceKind;
use crate::error::CliError;
use crate::runmeta::RunContext;

pub fn cmd_evaluate(ctx: &mut RunContext) -> Result<(), CliError> {
    let section = ctx
        .loaded
        .config
        .evaluate
        .clone()
        .ok_or_else(|| CliError::invalid("evaluate", "section missing from config"))?;

    let reference_path = resolve_manifest_path(ctx, &section.reference);
    let generated_path = resolve_manifest_path(ctx, &section.generated);
    let (ref_manifest, ref_dir) = load_manifest(&reference_path, "reference dataset")?;
    let (gen_manifest, gen_dir) = load_manifest(&generated_path, "generated dataset")?;
    ctx.note_input(&reference_path)?;
    ctx.note_input(&generated_path)?;

    let reference = load_normalized(&ref_manifest, &ref_dir, None)?;
    let generated = load_normalized(&gen_manifest, &gen_dir, None)?;
    if reference.len() != generated.len() {
        return Err(CliError::invalid(
            "evaluate.generated",
            format!(
                "paired metrics need equal counts: {} reference vs {} generated (pairing is by manifest order)",
                reference.len(),
                generated.len()
            ),
        ));
    }

    let codec_storage;
    let space = match section.feature_space {
        FeatureSpaceKind::CodecLatent => {
            let ckpt = section.codec_checkpoint.as_ref().ok_or_else(|| {
                CliError::invalid(
                    "evaluate.codec_checkpoint",
                    "codec-latent feature space needs a codec checkpoint",
                )
            })?;
            let path = ctx.loaded.resolve(ckpt);
            require_artifact(&path, "codec checkpoint")?;
            ctx.note_input(&path)?;
            codec_storage = CodecCheckpoint::load(&path)?;
            FeatureSpace::CodecLatent(&codec_storage)
        }
        FeatureSpaceKind::PcaFlat => FeatureSpace::PcaFlat { components: section.pca_components },
    };

    if !(section.tau > 0.0 && section.tau < 1.0) {
        return Err(CliError::invalid("evaluate.tau", "tau must be in (0, 1)"));
    }

    let fid_value = fid(&reference, &generated, &space)?;
    let r2_value = r2(&generated, &reference)?;
    let b_r2_value = binarized_r2(&generated, &reference, section.tau)?;

    let report = MetricReport {
        fid: Some(fid_value),
        r2: Some(r2_value),
        binarized_r2: Some(b_r2_value),
        macro_f1: None,
        config: MetricReportConfig {
            tau: Some(section.tau),
            feature_space: Some(space.id()),
            real_samples: Some(reference.len()),
            generated_samples: Some(generated.len()),
            ..Default::default()
        },
    };
    let out_path = ctx.run_dir.join("metrics.json");
    std::fs::write(&out_path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| CliError::internal(format!("writing {}: {e}", out_path.display())))?;
    ctx.note_output(&out_path);

    println!(
        "evaluate: fid={fid_value:.6} r2={r2_value:.6} binarized_r2={b_r2_value:.6} (space={}, tau={})",
        space.id(),
        section.tau
    );
    Ok(())
}

/// Accept either a manifest file or the directory containing one.
fn resolve_manifest_path(ctx: &RunContext, configured: &str) -> std::path::PathBuf {
    let p = ctx.loaded.resolve(configured);
    if p.is_dir() {
        p.join("manifest.json")
    } else {
        p
    }
}
