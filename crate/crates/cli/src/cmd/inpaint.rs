use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use sonic::flow::ClassId;
use sonic::inpaint::{sonic_inpaint, InpaintMetadata};
use sonic::io;
use sonic::seedopt::OptTrace;

use crate::args::InpaintArgs;
use crate::common::{
    at, inpaint_config, load_items, load_model, resolve_class, write_csv, write_json,
};

#[derive(Serialize)]
struct TraceRow {
    iter: usize,
    loss: f64,
    observed_mse: f64,
    grad_norm: f64,
}

#[derive(Serialize)]
struct TimingRow {
    iter: usize,
    millis: f64,
}

#[derive(Serialize)]
struct Meta<'a> {
    id: Option<usize>,
    class: ClassId,
    initial_loss: f64,
    final_loss: f64,
    #[serde(flatten)]
    metadata: &'a InpaintMetadata,
}

/// Writes the trace with its deterministic columns in `trace.csv` and the
/// wall-clock timings separately in `timing.csv`.
pub fn write_trace(dir: &std::path::Path, trace: &OptTrace) -> Result<()> {
    write_csv(
        &dir.join("trace.csv"),
        trace.records.iter().map(|r| TraceRow {
            iter: r.iter,
            loss: r.loss,
            observed_mse: r.observed_mse,
            grad_norm: r.grad_norm,
        }),
    )?;
    write_csv(
        &dir.join("timing.csv"),
        trace.records.iter().map(|r| TimingRow {
            iter: r.iter,
            millis: r.millis,
        }),
    )
}

pub fn run(a: &InpaintArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let items = load_items(&a.input)?;
    items.par_iter().try_for_each(|item| -> Result<()> {
        let class = resolve_class(&a.pipeline, &model, item);
        let config = inpaint_config(&a.pipeline, class)?;
        let (result, trace) = sonic_inpaint(&model, &item.image, &item.mask, &config)
            .with_context(|| format!("instance {}", item.label()))?;
        let dir = item.dir(&a.out);
        std::fs::create_dir_all(&dir).with_context(|| at(&dir))?;
        io::write_field(&dir.join("result.snf"), &result.image)?;
        io::write_field(&dir.join("latent.snf"), &result.latent)?;
        io::write_field(&dir.join("seed.snf"), &result.seed)?;
        io::write_pgm(&dir.join("result.pgm"), &result.image, 0.0, 1.0)?;
        write_trace(&dir, &trace)?;
        write_json(
            &dir.join("meta.json"),
            &Meta {
                id: item.id,
                class,
                initial_loss: trace.first().map_or(f64::NAN, |r| r.loss),
                final_loss: trace.last().map_or(f64::NAN, |r| r.loss),
                metadata: &result.metadata,
            },
        )
    })
}
