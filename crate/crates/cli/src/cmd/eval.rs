use anyhow::{Context, Result};
use serde::Serialize;
use sonic::fields::{Field, MaskField};
use sonic::metrics::{masked_metric, Metric, Region, SsimConfig};
use sonic::SonicError;

use crate::args::EvalArgs;
use crate::common::{at, load_items, median, read_field, write_csv, write_json};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RegionScores {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// MSE, PSNR (peak 1) and SSIM of `result` against `truth` over one region.
/// A region too small for any SSIM window scores NaN there.
pub fn region_scores(
    result: &Field,
    truth: &Field,
    mask: &MaskField,
    region: Region,
    ssim_window: usize,
) -> Result<RegionScores> {
    let score = |metric| match masked_metric(metric, result, truth, mask, region) {
        Err(SonicError::EmptyRegion) => Ok(f64::NAN),
        other => other,
    };
    Ok(RegionScores {
        mse: score(Metric::Mse)?,
        psnr: score(Metric::Psnr { peak: 1.0 })?,
        ssim: score(Metric::Ssim(SsimConfig::default().with_window(ssim_window)))?,
    })
}

#[derive(Serialize)]
struct Row {
    id: String,
    region: Region,
    mse: f64,
    psnr: f64,
    ssim: f64,
}

#[derive(Serialize)]
struct Summary {
    instances: usize,
    median_unobserved_ssim: f64,
    median_unobserved_psnr: f64,
    median_observed_mse: f64,
}

pub fn run(a: &EvalArgs) -> Result<()> {
    let items = load_items(&a.input)?;
    let mut rows = Vec::with_capacity(2 * items.len());
    for item in &items {
        let path = item.dir(&a.results).join("result.snf");
        let result = read_field(&path)?;
        for region in [Region::Observed, Region::Unobserved] {
            let scores = region_scores(&result, &item.image, &item.mask, region, a.ssim_window)
                .with_context(|| at(&path))?;
            rows.push(Row {
                id: item.label(),
                region,
                mse: scores.mse,
                psnr: scores.psnr,
                ssim: scores.ssim,
            });
        }
    }
    let pick = |region: Region, f: fn(&Row) -> f64| {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r.region == region)
            .map(f)
            .filter(|v| !v.is_nan())
            .collect();
        median(&mut v)
    };
    let summary = Summary {
        instances: items.len(),
        median_unobserved_ssim: pick(Region::Unobserved, |s| s.ssim),
        median_unobserved_psnr: pick(Region::Unobserved, |s| s.psnr),
        median_observed_mse: pick(Region::Observed, |s| s.mse),
    };
    write_csv(&a.out.join("metrics.csv"), &rows)?;
    write_json(&a.out.join("summary.json"), &summary)
}
