use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sonic::data::SceneKind;
use sonic::inpaint::{sonic_inpaint, EncoderInput};
use sonic::metrics::{whiteness_report, Region};
use sonic::seedopt::OptimDomain;

use crate::args::{AblateArgs, Encoder, InputFlags, PipelineFlags, Toggle};
use crate::common::{inpaint_config, load_items, load_model, resolve_class, write_csv};

use super::eval::{region_scores, RegionScores};

#[derive(Serialize)]
struct Row {
    id: usize,
    scene_kind: Option<SceneKind>,
    method: String,
    domain: OptimDomain,
    grad_mask: Toggle,
    encoder: EncoderInput,
    initial_loss: f64,
    final_loss: f64,
    final_observed_mse: f64,
    seed_whiteness_max_dev: f64,
    unobserved_mse: f64,
    unobserved_psnr: f64,
    unobserved_ssim: f64,
}

/// The four optimizer variants on the NN-filled input, then the same
/// settings as the command-line flags with the ground-truth encoder.
fn variants(flags: &PipelineFlags) -> Vec<(String, PipelineFlags)> {
    let mut out = Vec::with_capacity(5);
    for domain in [OptimDomain::Spectral, OptimDomain::Spatial] {
        for mask in [Toggle::On, Toggle::Off] {
            let name = format!(
                "{domain}_{}",
                if mask == Toggle::On { "mask" } else { "nomask" }
            );
            out.push((
                name,
                PipelineFlags {
                    domain,
                    grad_mask: mask,
                    encoder: Encoder::NnFill,
                    ..flags.clone()
                },
            ));
        }
    }
    out.push((
        "gt_encoder".to_string(),
        PipelineFlags {
            encoder: Encoder::GroundTruth,
            ..flags.clone()
        },
    ));
    out
}

pub fn run(a: &AblateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let items = load_items(&InputFlags {
        manifest: Some(a.manifest.clone()),
        image: None,
        mask: None,
    })?;
    let grid = variants(&a.pipeline);
    let per_item: Vec<Vec<Row>> = items
        .par_iter()
        .map(|item| {
            let id = item.id.expect("manifest items carry ids");
            let class = resolve_class(&a.pipeline, &model, item);
            grid.iter()
                .map(|(name, flags)| {
                    let config = inpaint_config(flags, class)?;
                    let (result, trace) = sonic_inpaint(&model, &item.image, &item.mask, &config)
                        .with_context(|| format!("instance {id}, {name}"))?;
                    let RegionScores { mse, psnr, ssim } = region_scores(
                        &result.image,
                        &item.image,
                        &item.mask,
                        Region::Unobserved,
                        a.ssim_window,
                    )?;
                    Ok(Row {
                        id,
                        scene_kind: item.scene_kind,
                        method: name.clone(),
                        domain: flags.domain,
                        grad_mask: flags.grad_mask,
                        encoder: config.encoder_input,
                        initial_loss: trace.first().map_or(f64::NAN, |r| r.loss),
                        final_loss: trace.last().map_or(f64::NAN, |r| r.loss),
                        final_observed_mse: trace.last().map_or(f64::NAN, |r| r.observed_mse),
                        seed_whiteness_max_dev: whiteness_report(&result.seed)?
                            .max_band_deviation(),
                        unobserved_mse: mse,
                        unobserved_psnr: psnr,
                        unobserved_ssim: ssim,
                    })
                })
                .collect::<Result<Vec<Row>>>()
        })
        .collect::<Result<_>>()?;
    write_csv(&a.out.join("ablate.csv"), per_item.into_iter().flatten())
}
