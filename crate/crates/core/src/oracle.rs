//! Reference gradients: exact reverse-mode differentiation through the
//! whole Euler sampler, finite differences, and a comparison report.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::fields::{apply_mask, Field, MaskField, SeedRng};
use crate::flow::{
    denoise, denoise_with_trajectory, velocity_vjp, GuidanceConfig, SamplerConfig, VelocityModel,
};
use crate::scalar::Scalar;

/// `||y - A D_T(x_t)||^2` summed over observed cells.
pub fn true_loss<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x_t: &Field<T>,
    y: &Field<T>,
    mask: &MaskField,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<T> {
    let x0 = denoise(model, x_t, sampler, guidance)?.x0;
    x0.ensure_same_shape(y, "true loss")?;
    let r = apply_mask(&x0.sub(y)?, mask)?;
    Ok(r.norm_sq())
}

/// Exact gradient of [`true_loss`] with respect to `x_t`.
///
/// The forward pass keeps every state `x_k`. Going backwards,
/// `lambda_T = 2 A (x_0 - y)` and each step `x_{k+1} = x_k - h v(x_k, s_k)`
/// contributes `lambda_k = lambda_{k+1} - h J_v(x_k, s_k)^T lambda_{k+1}`.
pub fn unrolled_grad<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x_t: &Field<T>,
    y: &Field<T>,
    mask: &MaskField,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<Field<T>> {
    let run = denoise_with_trajectory(model, x_t, sampler, guidance)?;
    let states = run.trajectory.expect("trajectory was requested");
    run.x0.ensure_same_shape(y, "unrolled gradient")?;
    let two = T::lit(2.0);
    let mut lambda = apply_mask(&run.x0.zip_map(y, |a, b| two * (a - b))?, mask)?;
    let h = sampler.step_size::<T>();
    for k in (0..sampler.steps).rev() {
        let s = sampler.time::<T>(k);
        let jt = velocity_vjp(model, &states[k], s, guidance.class, guidance, &lambda)?;
        lambda.axpy(-h, &jt)?;
        if !lambda.is_finite() {
            return Err(SonicError::Diverged {
                stage: "unrolled gradient",
                step: k,
                detail: "non-finite adjoint".into(),
            });
        }
    }
    Ok(lambda)
}

/// Central differences on every coordinate.
pub fn finite_diff_grad<T: Scalar>(
    f: impl Fn(&Field<T>) -> Result<f64>,
    x: &Field<T>,
    h: f64,
) -> Result<Field<T>> {
    check_step(h)?;
    let mut out = Field::zeros(x.shape())?;
    for i in 0..x.len() {
        out.data_mut()[i] = T::lit(central(&f, x, i, h)?);
    }
    Ok(out)
}

/// Central differences on `count` distinct coordinates chosen by `rng`.
/// Returns `(flat index, derivative)` pairs in increasing index order.
pub fn finite_diff_sampled<T: Scalar>(
    f: impl Fn(&Field<T>) -> Result<f64>,
    x: &Field<T>,
    h: f64,
    count: usize,
    rng: &mut SeedRng,
) -> Result<Vec<(usize, f64)>> {
    check_step(h)?;
    let mut idx: Vec<usize> = (0..x.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(count.min(x.len()));
    idx.sort_unstable();
    idx.into_iter()
        .map(|i| Ok((i, central(&f, x, i, h)?)))
        .collect()
}

fn check_step(h: f64) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(SonicError::config(
            "h",
            format!("step must be positive, got {h}"),
        ));
    }
    Ok(())
}

fn central<T: Scalar>(
    f: &impl Fn(&Field<T>) -> Result<f64>,
    x: &Field<T>,
    i: usize,
    h: f64,
) -> Result<f64> {
    let mut probe = x.clone();
    let base = x.data()[i];
    probe.data_mut()[i] = base + T::lit(h);
    let plus = f(&probe)?;
    probe.data_mut()[i] = base - T::lit(h);
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * h))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradComparison {
    /// Cosine similarity; 1 when both are zero, 0 when exactly one is.
    pub cosine: f64,
    /// `||a - b|| / ||b||`; 0 when both are zero, infinite when only `b` is.
    pub rel_l2: f64,
    /// Jaccard index of the nonzero supports; 1 when both are empty.
    pub support_overlap: f64,
}

/// Compares a candidate gradient `g_lin` against a reference `g_true`.
pub fn compare_grads<T: Scalar>(g_lin: &Field<T>, g_true: &Field<T>) -> Result<GradComparison> {
    g_lin.ensure_same_shape(g_true, "gradient comparison")?;
    let a: Vec<f64> = g_lin.data().iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = g_true.data().iter().map(|v| v.as_f64()).collect();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let cosine = match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (false, false) => (dot / (na * nb)).clamp(-1.0, 1.0),
        _ => 0.0,
    };
    let diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let rel_l2 = if nb == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / nb
    };
    let (mut both, mut either) = (0usize, 0usize);
    for (x, y) in a.iter().zip(&b) {
        let (p, q) = (*x != 0.0, *y != 0.0);
        both += (p && q) as usize;
        either += (p || q) as usize;
    }
    let support_overlap = if either == 0 {
        1.0
    } else {
        both as f64 / either as f64
    };
    Ok(GradComparison {
        cosine,
        rel_l2,
        support_overlap,
    })
}
