//! Flow models and the deterministic `T`-step denoiser.
//!
//! Time runs on the unit interval: `s = 1` is pure noise and `s = 0` is
//! data. The sampler grid is `s_k = 1 - k/T` for `k = 0..=T` and each Euler
//! step evaluates the velocity at its left endpoint, so `s = 0` is never
//! queried.

mod analytic;
mod net;
mod train;

use serde::{Deserialize, Serialize};

pub use analytic::{ConstantVelocity, DiracVelocity};
pub use net::{Activation, Architecture, Checkpoint, ConvVelocityNet, ForwardCache, ParamGrads};
pub use train::{train_flow, TrainConfig, TrainReport, TrainSample};

use crate::error::{Result, SonicError};
use crate::fields::Field;
use crate::scalar::Scalar;

/// Class label. `ClassId::NULL` (0) is the reserved unconditional class;
/// conditional models accept `1..=num_classes`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct ClassId(pub u32);

impl ClassId {
    pub const NULL: ClassId = ClassId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 20 }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Result<Self> {
        let c = SamplerConfig { steps };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(SonicError::config("T", "step count must be at least 1"));
        }
        Ok(())
    }

    /// `s_k = 1 - k/T`; exact at both ends.
    pub fn time<T: Scalar>(&self, k: usize) -> T {
        T::lit(1.0 - k as f64 / self.steps as f64)
    }

    pub fn step_size<T: Scalar>(&self) -> T {
        T::lit(1.0 / self.steps as f64)
    }
}

/// Classifier-free guidance: `v_u + scale * (v_c - v_u)` with `class` as the
/// conditional label and `null_class` for the unconditional branch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub class: ClassId,
    pub null_class: ClassId,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            scale: 2.0,
            class: ClassId::NULL,
            null_class: ClassId::NULL,
        }
    }
}

impl GuidanceConfig {
    pub fn with_class(mut self, class: ClassId) -> Self {
        self.class = class;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scale.is_finite() || self.scale < 0.0 {
            return Err(SonicError::config(
                "cfg-scale",
                format!("must be finite and >= 0, got {}", self.scale),
            ));
        }
        Ok(())
    }
}

/// A velocity field `v(x, s, class)`.
pub trait VelocityModel<T: Scalar>: Send + Sync {
    /// Number of conditional classes; 0 for an unconditional model.
    fn num_classes(&self) -> usize {
        0
    }

    fn eval(&self, x: &Field<T>, s: T, class: ClassId) -> Result<Field<T>>;

    /// `J^T · cotangent`, where `J` is the Jacobian of `eval` with respect to
    /// `x` at `(x, s, class)`.
    fn vjp_input(
        &self,
        x: &Field<T>,
        s: T,
        class: ClassId,
        cotangent: &Field<T>,
    ) -> Result<Field<T>>;
}

fn check_time<T: Scalar>(s: T) -> Result<()> {
    if !(s > T::zero() && s <= T::one()) {
        return Err(SonicError::InvalidTime {
            value: s.as_f64(),
            range: "(0, 1]",
        });
    }
    Ok(())
}

fn check_class<T: Scalar, M: VelocityModel<T> + ?Sized>(model: &M, class: ClassId) -> Result<()> {
    if class.index() > model.num_classes() {
        return Err(SonicError::UnknownClass {
            id: class.0,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

/// Guided velocity. Unconditional models ignore the class and the scale.
pub fn velocity<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x: &Field<T>,
    s: T,
    class: ClassId,
    guidance: &GuidanceConfig,
) -> Result<Field<T>> {
    check_time(s)?;
    if model.num_classes() == 0 {
        return model.eval(x, s, ClassId::NULL);
    }
    check_class(model, class)?;
    check_class(model, guidance.null_class)?;
    let w = guidance.scale;
    if class == guidance.null_class || w == 0.0 {
        return model.eval(x, s, guidance.null_class);
    }
    let v_c = model.eval(x, s, class)?;
    if w == 1.0 {
        return Ok(v_c);
    }
    let v_u = model.eval(x, s, guidance.null_class)?;
    let w = T::lit(w);
    v_u.zip_map(&v_c, |u, c| u + w * (c - u))
}

/// VJP of [`velocity`] with respect to `x`.
pub fn velocity_vjp<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x: &Field<T>,
    s: T,
    class: ClassId,
    guidance: &GuidanceConfig,
    cotangent: &Field<T>,
) -> Result<Field<T>> {
    check_time(s)?;
    if model.num_classes() == 0 {
        return model.vjp_input(x, s, ClassId::NULL, cotangent);
    }
    check_class(model, class)?;
    check_class(model, guidance.null_class)?;
    let w = guidance.scale;
    if class == guidance.null_class || w == 0.0 {
        return model.vjp_input(x, s, guidance.null_class, cotangent);
    }
    let g_c = model.vjp_input(x, s, class, cotangent)?;
    if w == 1.0 {
        return Ok(g_c);
    }
    let g_u = model.vjp_input(x, s, guidance.null_class, cotangent)?;
    let w = T::lit(w);
    g_u.zip_map(&g_c, |u, c| u + w * (c - u))
}

/// Straight interpolant `s*eps + (1-s)*x0`; the flow-matching target
/// velocity along it is `eps - x0`.
pub fn interpolant<T: Scalar>(x0: &Field<T>, eps: &Field<T>, s: T) -> Result<Field<T>> {
    if !(s >= T::zero() && s <= T::one()) {
        return Err(SonicError::InvalidTime {
            value: s.as_f64(),
            range: "[0, 1]",
        });
    }
    let one_minus = T::one() - s;
    x0.zip_map(eps, |a, e| s * e + one_minus * a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseResult<T = f64> {
    pub x0: Field<T>,
    /// `x(s_k)` for `k = 0..=T` when recorded.
    pub trajectory: Option<Vec<Field<T>>>,
}

/// One Euler step `x - h * v(x, s_k)`.
pub(crate) fn euler_step<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x: &Field<T>,
    k: usize,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<Field<T>> {
    let s = sampler.time::<T>(k);
    let h = sampler.step_size::<T>();
    let v = velocity(model, x, s, guidance.class, guidance)?;
    let next = x.zip_map(&v, |a, b| a - h * b)?;
    if !next.is_finite() {
        return Err(SonicError::Diverged {
            stage: "denoise",
            step: k,
            detail: format!("non-finite state after step at s = {}", s.as_f64()),
        });
    }
    Ok(next)
}

/// The `T`-step deterministic denoiser `D_T`.
pub fn denoise<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x_t: &Field<T>,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<DenoiseResult<T>> {
    run_denoise(model, x_t, sampler, guidance, false)
}

pub fn denoise_with_trajectory<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x_t: &Field<T>,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<DenoiseResult<T>> {
    run_denoise(model, x_t, sampler, guidance, true)
}

fn run_denoise<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x_t: &Field<T>,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    record: bool,
) -> Result<DenoiseResult<T>> {
    sampler.validate()?;
    guidance.validate()?;
    if !x_t.is_finite() {
        return Err(SonicError::NonFinite("initial seed".into()));
    }
    let mut trajectory = record.then(|| Vec::with_capacity(sampler.steps + 1));
    let mut x = x_t.clone();
    for k in 0..sampler.steps {
        let next = euler_step(model, &x, k, sampler, guidance)?;
        if let Some(t) = trajectory.as_mut() {
            t.push(x);
        }
        x = next;
    }
    if let Some(t) = trajectory.as_mut() {
        t.push(x.clone());
    }
    Ok(DenoiseResult { x0: x, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gaussian_field, SeedRng, Shape};

    #[test]
    fn interpolant_endpoints() {
        let shape = Shape::new(1, 2, 3);
        let x0: Field = gaussian_field(&mut SeedRng::new(1), shape).unwrap();
        let eps: Field = gaussian_field(&mut SeedRng::new(2), shape).unwrap();
        assert_eq!(interpolant(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(interpolant(&x0, &eps, 1.0).unwrap(), eps);
        let zero = Field::zeros(shape).unwrap();
        let two = Field::filled(shape, 2.0).unwrap();
        let mid = interpolant(&zero, &two, 0.5).unwrap();
        assert!(mid.data().iter().all(|&v| v == 1.0));
        assert!(interpolant(&zero, &two, 1.5).is_err());
        assert!(interpolant(&zero, &two, -0.1).is_err());
    }

    #[test]
    fn sampler_grid_is_exact_at_ends() {
        let s = SamplerConfig::new(7).unwrap();
        assert_eq!(s.time::<f64>(0), 1.0);
        assert_eq!(s.time::<f64>(7), 0.0);
        assert!(SamplerConfig::new(0).is_err());
    }

    #[test]
    fn constant_model_is_integrated_exactly() {
        let shape = Shape::new(2, 3, 3);
        let c: Field = gaussian_field(&mut SeedRng::new(5), shape).unwrap();
        let model = ConstantVelocity::new(c.clone());
        let x_t: Field = gaussian_field(&mut SeedRng::new(6), shape).unwrap();
        for t in [1, 4, 20] {
            let out = denoise(
                &model,
                &x_t,
                &SamplerConfig::new(t).unwrap(),
                &GuidanceConfig::default(),
            )
            .unwrap();
            let expected = x_t.sub(&c).unwrap();
            assert!(out.x0.max_abs_diff(&expected).unwrap() < 1e-12);
        }
    }

    #[test]
    fn trajectory_records_every_state() {
        let shape = Shape::new(1, 4, 4);
        let c: Field = gaussian_field(&mut SeedRng::new(9), shape).unwrap();
        let model = DiracVelocity::new(c);
        let x_t: Field = gaussian_field(&mut SeedRng::new(10), shape).unwrap();
        let sampler = SamplerConfig::new(5).unwrap();
        let g = GuidanceConfig::default();
        let out = denoise_with_trajectory(&model, &x_t, &sampler, &g).unwrap();
        let traj = out.trajectory.unwrap();
        assert_eq!(traj.len(), 6);
        assert_eq!(traj[0], x_t);
        assert_eq!(traj[5], out.x0);
        let h = sampler.step_size::<f64>();
        for k in 0..5 {
            let v = velocity(&model, &traj[k], sampler.time(k), ClassId::NULL, &g).unwrap();
            let step = traj[k].zip_map(&v, |a, b| a - h * b).unwrap();
            assert_eq!(step, traj[k + 1]);
        }
    }

    #[test]
    fn single_step_matches_definition() {
        let shape = Shape::new(1, 3, 3);
        let c: Field = gaussian_field(&mut SeedRng::new(12), shape).unwrap();
        let model = DiracVelocity::new(c);
        let x_t: Field = gaussian_field(&mut SeedRng::new(13), shape).unwrap();
        let g = GuidanceConfig::default();
        let out = denoise(&model, &x_t, &SamplerConfig::new(1).unwrap(), &g).unwrap();
        let v = velocity(&model, &x_t, 1.0, ClassId::NULL, &g).unwrap();
        assert_eq!(out.x0, x_t.sub(&v).unwrap());
    }

    #[test]
    fn non_finite_seed_rejected() {
        let shape = Shape::new(1, 1, 2);
        let model = ConstantVelocity::new(Field::<f64>::zeros(shape).unwrap());
        let mut x = Field::zeros(shape).unwrap();
        x.data_mut()[1] = f64::NAN;
        assert!(denoise(
            &model,
            &x,
            &SamplerConfig::default(),
            &GuidanceConfig::default()
        )
        .is_err());
    }
}
