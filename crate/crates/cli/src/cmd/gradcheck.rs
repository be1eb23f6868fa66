use anyhow::{Context, Result};
use serde::Serialize;
use sonic::fields::{gaussian_field, Field, SeedRng, Shape};
use sonic::inpaint::EncoderInput;
use sonic::io;
use sonic::latent::{encode_ground_truth, encode_observation};
use sonic::oracle::{compare_grads, finite_diff_sampled, true_loss, unrolled_grad};
use sonic::seedopt::optimize_from;
use sonic::SonicError;

use crate::args::GradcheckArgs;
use crate::common::{
    inpaint_config, load_items, load_model, median, resolve_class, write_csv, write_json,
};

#[derive(Serialize)]
struct IterRow {
    iter: usize,
    loss: f64,
    cosine: f64,
    rel_l2: f64,
    support_overlap: f64,
}

#[derive(Serialize)]
struct FdRow {
    index: usize,
    finite_diff: f64,
    unrolled: f64,
    linearized: f64,
}

#[derive(Serialize)]
struct Report {
    iterations: usize,
    median_cosine: f64,
    min_cosine: f64,
    /// Relative L2 error of the unrolled gradient against finite
    /// differences on the sampled coordinates of the initial seed.
    fd_rel_err: f64,
}

pub fn run(a: &GradcheckArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let items = load_items(&a.input)?;
    let item = if a.input.manifest.is_some() {
        items
            .into_iter()
            .find(|i| i.id == Some(a.id))
            .ok_or_else(|| SonicError::Config {
                key: "id".into(),
                reason: format!("no manifest entry with id {}", a.id),
            })?
    } else {
        items.into_iter().next().context("no input")?
    };
    let class = resolve_class(&a.pipeline, &model, &item);
    let config = inpaint_config(&a.pipeline, class)?;
    let obs = match config.encoder_input {
        EncoderInput::NnFill => encode_observation(config.codec, &item.image, &item.mask)?,
        EncoderInput::GroundTruth => encode_ground_truth(config.codec, &item.image, &item.mask)?,
    };
    let (y, mask) = (&obs.y_latent, &obs.latent_mask);
    let initial: Field = gaussian_field(&mut SeedRng::new(config.seed), obs.latent_shape())?;

    let mut rows = Vec::new();
    let mut fd_rows = Vec::new();
    let mut endpoints = Vec::new();
    optimize_from(
        &model,
        &obs,
        &config.sampler,
        &config.guidance,
        &config.optim,
        initial,
        |view| {
            let unrolled = unrolled_grad(
                &model,
                view.seed,
                y,
                mask,
                &config.sampler,
                &config.guidance,
            )?;
            let cmp = compare_grads(view.grad, &unrolled)?;
            rows.push(IterRow {
                iter: view.iter,
                loss: view.record.loss,
                cosine: cmp.cosine,
                rel_l2: cmp.rel_l2,
                support_overlap: cmp.support_overlap,
            });
            if view.iter == 0 && a.fd_samples > 0 {
                let samples = finite_diff_sampled(
                    |x: &Field| true_loss(&model, x, y, mask, &config.sampler, &config.guidance),
                    view.seed,
                    a.fd_step,
                    a.fd_samples,
                    &mut SeedRng::new(config.seed).fork(1),
                )?;
                fd_rows.extend(samples.into_iter().map(|(index, d)| FdRow {
                    index,
                    finite_diff: d,
                    unrolled: unrolled.data()[index],
                    linearized: view.grad.data()[index],
                }));
            }
            endpoints.push(view.endpoint.clone());
            Ok(())
        },
    )?;

    let (num, den) = fd_rows.iter().fold((0.0, 0.0), |(n, d), r| {
        (
            n + (r.unrolled - r.finite_diff).powi(2),
            d + r.finite_diff.powi(2),
        )
    });
    let mut cosines: Vec<f64> = rows.iter().map(|r| r.cosine).collect();
    let report = Report {
        iterations: config.optim.iterations,
        min_cosine: cosines.iter().copied().fold(f64::INFINITY, f64::min),
        median_cosine: median(&mut cosines),
        fd_rel_err: if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        },
    };
    write_csv(&a.out.join("gradcheck.csv"), &rows)?;
    write_csv(&a.out.join("fd.csv"), &fd_rows)?;
    write_json(&a.out.join("report.json"), &report)?;
    io::write_pgm(&a.out.join("endpoints.pgm"), &tile(&endpoints)?, 0.0, 1.0)?;
    Ok(())
}

/// Lays the per-iteration endpoints side by side in one image.
fn tile(fields: &[Field]) -> Result<Field> {
    let s = fields[0].shape();
    let n = fields.len();
    Ok(Field::from_fn(
        Shape::new(s.channels, s.height, s.width * n),
        |c, y, x| fields[x / s.width].get(c, y, x % s.width),
    )?)
}
