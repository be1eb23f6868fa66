//! Seed optimization through a linearized denoising trajectory.
//!
//! The denoiser `D_T` is approximated around the current seed `x_T` by the
//! straight path from `x_T` to `D_T(x_T)`, with the direction
//! `D_T(x_T) - x_T` held constant (stop-gradient). The fit loss
//! `|| y - A (sg[D_T(x_T) - x_T] + x_T) ||^2` then has the closed-form
//! gradient `2 A (x̂0 - y)` with respect to `x_T`, so the denoiser is only
//! ever run forward.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::fields::{apply_mask, gaussian_field, Field, MaskField, SeedRng};
use crate::flow::{denoise, GuidanceConfig, SamplerConfig, VelocityModel};
use crate::latent::Observation;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::spectral::{adjoint_to_spectrum, dft2, idft2, Spectrum};

/// Straight-line stand-in for the sampling trajectory, anchored at a seed
/// and its fully denoised endpoint. Time follows the sampler's step index:
/// `t = T` is the seed and `t = 0` the endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTrajectory<T = f64> {
    seed: Field<T>,
    endpoint: Field<T>,
    steps: usize,
}

impl<T: Scalar> LinearTrajectory<T> {
    pub fn new(seed: Field<T>, endpoint: Field<T>, steps: usize) -> Result<Self> {
        seed.ensure_same_shape(&endpoint, "linear trajectory")?;
        SamplerConfig::new(steps)?;
        Ok(LinearTrajectory {
            seed,
            endpoint,
            steps,
        })
    }

    pub fn seed(&self) -> &Field<T> {
        &self.seed
    }

    pub fn endpoint(&self) -> &Field<T> {
        &self.endpoint
    }

    /// `(endpoint - seed)(1 - t/T) + seed`. Exact at `t = T` and `t = 0`.
    pub fn eval(&self, t: f64) -> Result<Field<T>> {
        if !(0.0..=self.steps as f64).contains(&t) {
            return Err(SonicError::InvalidTime {
                value: t,
                range: "[0, T]",
            });
        }
        if t == self.steps as f64 {
            return Ok(self.seed.clone());
        }
        if t == 0.0 {
            return Ok(self.endpoint.clone());
        }
        let a = T::lit(1.0 - t / self.steps as f64);
        self.endpoint.zip_map(&self.seed, |e, s| (e - s) * a + s)
    }

    /// The stop-gradient term `D_T(x_T) - x_T`, frozen at the anchor.
    pub fn offset(&self) -> Field<T> {
        self.endpoint
            .sub(&self.seed)
            .expect("shapes checked at construction")
    }

    /// Linearized estimate of the denoised output for a seed `x` near the
    /// anchor: `offset + x`.
    pub fn estimate_at(&self, x: &Field<T>) -> Result<Field<T>> {
        self.offset().add(x)
    }

    /// `sum over observed cells of (y - (offset + x))^2`.
    pub fn loss_at(&self, x: &Field<T>, y: &Field<T>, mask: &MaskField) -> Result<T> {
        masked_sq_error(&self.estimate_at(x)?, y, mask)
    }

    /// `2 A (offset + x - y)`; zero on every unobserved cell.
    pub fn grad_at(&self, x: &Field<T>, y: &Field<T>, mask: &MaskField) -> Result<Field<T>> {
        let estimate = self.estimate_at(x)?;
        estimate.ensure_same_shape(y, "linearized gradient")?;
        let two = T::lit(2.0);
        apply_mask(&estimate.zip_map(y, |e, t| two * (e - t))?, mask)
    }
}

fn masked_sq_error<T: Scalar>(estimate: &Field<T>, y: &Field<T>, mask: &MaskField) -> Result<T> {
    estimate.ensure_same_shape(y, "masked squared error")?;
    mask.ensure_matches(y.shape())?;
    let plane = y.shape().plane();
    Ok(estimate
        .data()
        .iter()
        .zip(y.data())
        .enumerate()
        .filter(|(i, _)| mask.observed_at(i % plane))
        .map(|(_, (&e, &t))| (t - e) * (t - e))
        .sum())
}

/// `sg[endpoint - x_T] + x_T` evaluated at `x_T`; numerically the endpoint.
pub fn linearized_estimate<T: Scalar>(x_t: &Field<T>, endpoint: &Field<T>) -> Result<Field<T>> {
    endpoint.sub(x_t)?.add(x_t)
}

pub fn linearized_loss<T: Scalar>(
    x_t: &Field<T>,
    endpoint: &Field<T>,
    y: &Field<T>,
    mask: &MaskField,
) -> Result<T> {
    masked_sq_error(&linearized_estimate(x_t, endpoint)?, y, mask)
}

pub fn linearized_grad<T: Scalar>(
    x_t: &Field<T>,
    endpoint: &Field<T>,
    y: &Field<T>,
    mask: &MaskField,
) -> Result<Field<T>> {
    let estimate = linearized_estimate(x_t, endpoint)?;
    estimate.ensure_same_shape(y, "linearized gradient")?;
    let two = T::lit(2.0);
    apply_mask(&estimate.zip_map(y, |e, t| two * (e - t))?, mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimDomain {
    /// Adam runs on the seed's Fourier coefficients.
    Spectral,
    /// Adam runs on the seed's pixels.
    Spatial,
}

impl std::str::FromStr for OptimDomain {
    type Err = SonicError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(OptimDomain::Spectral),
            "spatial" => Ok(OptimDomain::Spatial),
            other => Err(SonicError::config(
                "domain",
                format!("expected `spectral` or `spatial`, got `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for OptimDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimDomain::Spectral => "spectral",
            OptimDomain::Spatial => "spatial",
        })
    }
}

/// Scale of the spectral coefficients Adam sees. The stored spectrum is
/// always unitary; with `Unnormalized` the optimizer's parameter is
/// `sqrt(H*W)` times it, i.e. the plain (unscaled) forward DFT, which is
/// what FFT libraries return by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralScaling {
    Unitary,
    Unnormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: usize,
    pub domain: OptimDomain,
    pub gradient_masking: bool,
    pub spectral_scaling: SpectralScaling,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 3.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 20,
            domain: OptimDomain::Spectral,
            gradient_masking: true,
            spectral_scaling: SpectralScaling::Unnormalized,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()
    }
}

/// Gradient expressed in the optimizer's parameter domain.
#[derive(Clone, Debug, PartialEq)]
pub enum SeedGrad<T> {
    Spectral(Spectrum<T>),
    Spatial(Field<T>),
}

/// Trainable seed together with its frozen initial sample and Adam state.
///
/// In spectral mode the trainable parameter is the unitary spectrum and
/// `seed` is kept equal to its inverse transform; in spatial mode `seed` is
/// the parameter itself.
#[derive(Clone, Debug)]
pub struct SeedState<T = f64> {
    domain: OptimDomain,
    scaling: SpectralScaling,
    spectrum: Option<Spectrum<T>>,
    seed: Field<T>,
    initial: Field<T>,
    adam: Adam<T>,
}

impl<T: Scalar> SeedState<T> {
    pub fn new(initial: Field<T>, config: &OptimConfig) -> Result<Self> {
        config.validate()?;
        let (spectrum, len) = match config.domain {
            OptimDomain::Spectral => (Some(dft2(&initial)?), 2 * initial.len()),
            OptimDomain::Spatial => (None, initial.len()),
        };
        Ok(SeedState {
            domain: config.domain,
            scaling: config.spectral_scaling,
            spectrum,
            seed: initial.clone(),
            initial,
            adam: Adam::new(config.adam(), len)?,
        })
    }

    pub fn domain(&self) -> OptimDomain {
        self.domain
    }

    /// Current spatial seed `x_T`.
    pub fn seed(&self) -> &Field<T> {
        &self.seed
    }

    /// Current spectral seed `X_T` (spectral mode only).
    pub fn spectrum(&self) -> Option<&Spectrum<T>> {
        self.spectrum.as_ref()
    }

    pub fn initial(&self) -> &Field<T> {
        &self.initial
    }

    pub fn first_moment(&self) -> &[T] {
        self.adam.first_moment()
    }

    pub fn second_moment(&self) -> &[T] {
        self.adam.second_moment()
    }

    pub fn step(&self) -> u64 {
        self.adam.steps()
    }

    fn parameter_scale(&self) -> T {
        match self.scaling {
            SpectralScaling::Unitary => T::one(),
            SpectralScaling::Unnormalized => T::lit((self.seed.shape().plane() as f64).sqrt()),
        }
    }

    /// One bias-corrected Adam update of the trainable parameter.
    pub fn adam_step(&mut self, grad: &SeedGrad<T>) -> Result<()> {
        match (self.domain, grad) {
            (OptimDomain::Spectral, SeedGrad::Spectral(g)) => {
                let scale = self.parameter_scale();
                let spectrum = self
                    .spectrum
                    .as_mut()
                    .expect("spectral state holds a spectrum");
                if g.shape() != spectrum.shape() {
                    return Err(SonicError::ShapeMismatch {
                        what: "spectral gradient",
                        expected: spectrum.shape(),
                        got: g.shape(),
                    });
                }
                // Parameter P = scale * X, so dL/dP = (dL/dX) / scale.
                let flat: Vec<T> = g.to_interleaved().into_iter().map(|v| v / scale).collect();
                let delta = self.adam.update(&flat)?;
                for (z, d) in spectrum.data_mut().iter_mut().zip(delta.chunks_exact(2)) {
                    z.re -= d[0] / scale;
                    z.im -= d[1] / scale;
                }
                self.seed = idft2(spectrum)?;
                Ok(())
            }
            (OptimDomain::Spatial, SeedGrad::Spatial(g)) => {
                self.seed.ensure_same_shape(g, "spatial gradient")?;
                let delta = self.adam.update(g.data())?;
                for (p, d) in self.seed.data_mut().iter_mut().zip(delta) {
                    *p -= d;
                }
                Ok(())
            }
            _ => Err(SonicError::config(
                "domain",
                format!(
                    "gradient domain does not match optimizer domain `{}`",
                    self.domain
                ),
            )),
        }
    }

    /// Restores every unobserved seed cell to the initial sample by direct
    /// copy in the spatial domain, then re-derives the spectrum.
    pub fn mask_project(&mut self, latent_mask: &MaskField) -> Result<()> {
        latent_mask.ensure_matches(self.seed.shape())?;
        let plane = self.seed.shape().plane();
        let initial = self.initial.data();
        for (i, v) in self.seed.data_mut().iter_mut().enumerate() {
            if !latent_mask.observed_at(i % plane) {
                *v = initial[i];
            }
        }
        if let Some(s) = self.spectrum.as_mut() {
            *s = dft2(&self.seed)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// Linearized loss at the current seed.
    pub loss: f64,
    /// Mean squared error of the true denoised output over observed cells.
    pub observed_mse: f64,
    /// Norm of the spatial gradient.
    pub grad_norm: f64,
    pub millis: f64,
}

/// One record per iteration, iteration 0 being the untouched initial seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptTrace {
    pub records: Vec<TraceRecord>,
}

impl OptTrace {
    pub fn first(&self) -> Option<&TraceRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,observed_mse,grad_norm,millis\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:.3}\n",
                r.iter, r.loss, r.observed_mse, r.grad_norm, r.millis
            ));
        }
        out
    }
}

/// What an observer sees at every iteration, before the update.
pub struct IterationView<'a, T> {
    pub iter: usize,
    pub seed: &'a Field<T>,
    pub endpoint: &'a Field<T>,
    pub grad: &'a Field<T>,
    pub record: &'a TraceRecord,
}

/// Runs the seed optimization from a fresh Gaussian seed drawn from `rng`.
pub fn optimize_seed<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    observation: &Observation<T>,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    config: &OptimConfig,
    rng: &mut SeedRng,
) -> Result<(SeedState<T>, OptTrace)> {
    let initial = gaussian_field(rng, observation.latent_shape())?;
    optimize_from(
        model,
        observation,
        sampler,
        guidance,
        config,
        initial,
        |_| Ok(()),
    )
}

/// Runs the seed optimization from a given initial seed. `observer` is
/// called once per iteration with the current seed, its denoised endpoint
/// and the linearized gradient.
///
/// Each iteration: denoise the current seed, evaluate the linearized loss
/// and gradient, record the trace, then (except after the last record)
/// take an Adam step in the configured domain and, with gradient masking,
/// reset unobserved seed cells to their initial values.
pub fn optimize_from<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    observation: &Observation<T>,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    config: &OptimConfig,
    initial: Field<T>,
    mut observer: impl FnMut(&IterationView<'_, T>) -> Result<()>,
) -> Result<(SeedState<T>, OptTrace)> {
    observation.validate()?;
    sampler.validate()?;
    guidance.validate()?;
    initial.ensure_same_shape(&observation.y_latent, "initial seed")?;
    let y = &observation.y_latent;
    let mask = &observation.latent_mask;
    let observed_entries = mask.observed_count() * y.shape().channels;
    let mut state = SeedState::new(initial, config)?;
    let mut trace = OptTrace::default();
    let start = Instant::now();

    for iter in 0..=config.iterations {
        let outcome = (|| -> Result<(Field<T>, Field<T>, TraceRecord)> {
            let endpoint = denoise(model, state.seed(), sampler, guidance)?.x0;
            let loss = linearized_loss(state.seed(), &endpoint, y, mask)?.as_f64();
            if !loss.is_finite() {
                return Err(SonicError::NonFinite(format!(
                    "linearized loss at iteration {iter}"
                )));
            }
            let grad = linearized_grad(state.seed(), &endpoint, y, mask)?;
            let sse = masked_sq_error(&endpoint, y, mask)?.as_f64();
            let record = TraceRecord {
                iter,
                loss,
                observed_mse: if observed_entries == 0 {
                    0.0
                } else {
                    sse / observed_entries as f64
                },
                grad_norm: grad.norm().as_f64(),
                millis: start.elapsed().as_secs_f64() * 1e3,
            };
            Ok((endpoint, grad, record))
        })();
        let (endpoint, grad, record) = match outcome {
            Ok(v) => v,
            Err(e) => return Err(abort(e, trace)),
        };
        observer(&IterationView {
            iter,
            seed: state.seed(),
            endpoint: &endpoint,
            grad: &grad,
            record: &record,
        })?;
        trace.records.push(record);
        if iter == config.iterations {
            break;
        }
        let step = match config.domain {
            OptimDomain::Spectral => adjoint_to_spectrum(&grad).map(SeedGrad::Spectral),
            OptimDomain::Spatial => Ok(SeedGrad::Spatial(grad)),
        }
        .and_then(|g| state.adam_step(&g))
        .and_then(|_| {
            if config.gradient_masking {
                state.mask_project(mask)
            } else {
                Ok(())
            }
        });
        if let Err(e) = step {
            return Err(abort(e, trace));
        }
    }
    Ok((state, trace))
}

fn abort(source: SonicError, trace: OptTrace) -> SonicError {
    SonicError::SeedOptAborted {
        source: Box::new(source),
        trace: Box::new(trace),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Shape;
    use crate::latent::{encode_observation, LatentCodec};

    fn field(vals: &[f64], shape: Shape) -> Field<f64> {
        Field::from_vec(shape, vals.to_vec()).unwrap()
    }

    #[test]
    fn trajectory_endpoints_exact() {
        let shape = Shape::new(1, 2, 3);
        let a: Field = gaussian_field(&mut SeedRng::new(1), shape).unwrap();
        let b: Field = gaussian_field(&mut SeedRng::new(2), shape).unwrap();
        let traj = LinearTrajectory::new(a.clone(), b.clone(), 20).unwrap();
        assert_eq!(traj.eval(20.0).unwrap(), a);
        assert_eq!(traj.eval(0.0).unwrap(), b);
        let mid = traj.eval(10.0).unwrap();
        let expected = a.zip_map(&b, |x, y| 0.5 * (x + y)).unwrap();
        assert!(mid.max_abs_diff(&expected).unwrap() < 1e-15);
        assert!(traj.eval(21.0).is_err());
    }

    #[test]
    fn estimate_examples() {
        let shape = Shape::new(1, 3, 3);
        let x: Field = gaussian_field(&mut SeedRng::new(3), shape).unwrap();
        let e: Field = gaussian_field(&mut SeedRng::new(4), shape).unwrap();
        let est = linearized_estimate(&x, &e).unwrap();
        assert!(est.max_abs_diff(&e).unwrap() < 1e-14);
        assert_eq!(linearized_estimate(&x, &x).unwrap(), x);

        // Directional derivative of the frozen-offset estimate is the direction.
        let traj = LinearTrajectory::new(x.clone(), e, 5).unwrap();
        let d: Field = gaussian_field(&mut SeedRng::new(5), shape).unwrap();
        let h = 1e-3;
        let plus = traj
            .estimate_at(&x.zip_map(&d, |a, b| a + h * b).unwrap())
            .unwrap();
        let minus = traj
            .estimate_at(&x.zip_map(&d, |a, b| a - h * b).unwrap())
            .unwrap();
        let fd = plus.zip_map(&minus, |p, m| (p - m) / (2.0 * h)).unwrap();
        assert!(fd.max_abs_diff(&d).unwrap() < 1e-9);
    }

    #[test]
    fn loss_and_grad_hand_example() {
        let shape = Shape::new(1, 1, 2);
        let y = field(&[1.0, 42.0], shape);
        let mask = MaskField::new(1, 2, vec![true, false]).unwrap();
        let x_t = field(&[0.0, 0.0], shape);
        let endpoint = field(&[3.0, 9.0], shape);
        assert_eq!(linearized_loss(&x_t, &endpoint, &y, &mask).unwrap(), 4.0);
        assert_eq!(
            linearized_grad(&x_t, &endpoint, &y, &mask).unwrap().data(),
            &[4.0, 0.0]
        );

        let all_off = MaskField::zeros(1, 2).unwrap();
        assert_eq!(linearized_loss(&x_t, &endpoint, &y, &all_off).unwrap(), 0.0);
        let matched = field(&[1.0, -5.0], shape);
        assert_eq!(linearized_loss(&x_t, &matched, &y, &mask).unwrap(), 0.0);
    }

    fn spectral_state(shape: Shape, seed: u64) -> SeedState<f64> {
        let init: Field = gaussian_field(&mut SeedRng::new(seed), shape).unwrap();
        SeedState::new(init, &OptimConfig::default()).unwrap()
    }

    #[test]
    fn spectral_adam_keeps_seed_consistent() {
        let shape = Shape::new(2, 6, 8);
        let mut state = spectral_state(shape, 9);
        for k in 0..5 {
            let g: Field = gaussian_field(&mut SeedRng::new(100 + k), shape).unwrap();
            state
                .adam_step(&SeedGrad::Spectral(adjoint_to_spectrum(&g).unwrap()))
                .unwrap();
            let spectrum = state.spectrum().unwrap();
            assert_eq!(spectrum.hermitian_deviation(), 0.0);
            let back = idft2(spectrum).unwrap();
            assert!(back.max_abs_diff(state.seed()).unwrap() < 1e-9);
        }
        assert_eq!(state.step(), 5);
    }

    #[test]
    fn domain_mismatch_rejected() {
        let shape = Shape::new(1, 4, 4);
        let mut state = spectral_state(shape, 1);
        let g = Field::zeros(shape).unwrap();
        assert!(state.adam_step(&SeedGrad::Spatial(g)).is_err());
    }

    #[test]
    fn mask_projection_examples() {
        let shape = Shape::new(1, 6, 6);
        let half = MaskField::from_fn(6, 6, |y, _| y < 3).unwrap();
        let mut state = spectral_state(shape, 2);
        let g: Field = gaussian_field(&mut SeedRng::new(3), shape).unwrap();
        state
            .adam_step(&SeedGrad::Spectral(adjoint_to_spectrum(&g).unwrap()))
            .unwrap();

        let mut once = state.clone();
        once.mask_project(&half).unwrap();
        for y in 3..6 {
            for x in 0..6 {
                assert_eq!(
                    once.seed().get(0, y, x).to_bits(),
                    once.initial().get(0, y, x).to_bits()
                );
            }
        }
        let mut twice = once.clone();
        twice.mask_project(&half).unwrap();
        assert_eq!(twice.seed(), once.seed());

        let mut none = state.clone();
        none.mask_project(&MaskField::zeros(6, 6).unwrap()).unwrap();
        assert_eq!(none.seed(), none.initial());

        let mut all = state.clone();
        all.mask_project(&MaskField::ones(6, 6).unwrap()).unwrap();
        assert_eq!(all.seed(), state.seed());
        let before = state.spectrum().unwrap();
        let after = all.spectrum().unwrap();
        let diff: f64 = before
            .data()
            .iter()
            .zip(after.data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }

    #[test]
    fn zero_iterations_return_initial_seed() {
        let shape = Shape::new(1, 4, 4);
        let image = Field::filled(shape, 0.5).unwrap();
        let mask = MaskField::from_fn(4, 4, |y, _| y < 2).unwrap();
        let obs = encode_observation(LatentCodec::Identity, &image, &mask).unwrap();
        let model = crate::flow::DiracVelocity::new(image.clone());
        let config = OptimConfig {
            iterations: 0,
            ..Default::default()
        };
        let (state, trace) = optimize_seed(
            &model,
            &obs,
            &SamplerConfig::new(4).unwrap(),
            &GuidanceConfig::default(),
            &config,
            &mut SeedRng::new(77),
        )
        .unwrap();
        let expected: Field = gaussian_field(&mut SeedRng::new(77), shape).unwrap();
        assert_eq!(state.seed(), &expected);
        assert_eq!(trace.records.len(), 1);
    }
}
