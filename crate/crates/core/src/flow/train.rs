use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::fields::{gaussian_field, Field, SeedRng};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

use super::net::ConvVelocityNet;
use super::{interpolant, ClassId};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T = f64> {
    pub image: Field<T>,
    pub class: ClassId,
}

impl<T: Scalar> TrainSample<T> {
    pub fn unconditional(image: Field<T>) -> Self {
        TrainSample {
            image,
            class: ClassId::NULL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`; the rate decays linearly
    /// over the run.
    pub final_lr_fraction: f64,
    /// Probability of replacing a sample's class with the null class.
    pub class_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            steps_per_epoch: 50,
            batch_size: 16,
            lr: 2e-3,
            final_lr_fraction: 0.1,
            class_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(SonicError::config(
                "train",
                "epochs, steps_per_epoch and batch_size must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.class_dropout) {
            return Err(SonicError::config("class_dropout", "must lie in [0, 1]"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(SonicError::config(
                "final_lr_fraction",
                "must lie in (0, 1]",
            ));
        }
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
        .validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Flow-matching regression of `model(x_s, s, class)` onto `eps - x0` with
/// `x_s = s*eps + (1-s)*x0`, `s ~ U(0, 1]` and fresh `eps` per sample.
pub fn train_flow<T: Scalar>(
    mut model: ConvVelocityNet<T>,
    dataset: &[TrainSample<T>],
    config: &TrainConfig,
) -> Result<(ConvVelocityNet<T>, TrainReport)> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| SonicError::config("dataset", "must contain at least one sample"))?;
    let shape = first.image.shape();
    for (i, sample) in dataset.iter().enumerate() {
        if sample.image.shape() != shape {
            return Err(SonicError::ShapeMismatch {
                what: "training sample",
                expected: shape,
                got: sample.image.shape(),
            });
        }
        if sample.class.index() > model.architecture().num_classes {
            return Err(SonicError::config(
                "dataset",
                format!(
                    "sample {i} has class {} unknown to the model",
                    sample.class.0
                ),
            ));
        }
    }

    let mut rng = SeedRng::new(config.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..Default::default()
        },
        model.param_count(),
    )?;
    let total_steps = config.epochs * config.steps_per_epoch;
    let mut grads = vec![T::zero(); model.param_count()];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let inv_batch = T::lit(1.0 / config.batch_size as f64);
    let inv_n = T::lit(1.0 / shape.len() as f64);

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..config.steps_per_epoch {
            let global = epoch * config.steps_per_epoch + step;
            let progress = global as f64 / total_steps.max(1) as f64;
            adam.set_lr(config.lr * (1.0 - (1.0 - config.final_lr_fraction) * progress));
            grads.iter_mut().for_each(|g| *g = T::zero());
            for _ in 0..config.batch_size {
                let sample = &dataset[rng.int_inclusive(0, dataset.len() - 1)];
                let eps: Field<T> = gaussian_field(&mut rng, shape)?;
                let s = T::lit(rng.uniform_open());
                let class = if rng.uniform() < config.class_dropout {
                    ClassId::NULL
                } else {
                    sample.class
                };
                let x_s = interpolant(&sample.image, &eps, s)?;
                let target = eps.sub(&sample.image)?;
                let (out, cache) = model.forward(&x_s, s, class)?;
                let resid = out.sub(&target)?;
                let loss = (resid.norm_sq() * inv_n).as_f64();
                if !loss.is_finite() {
                    return Err(SonicError::Diverged {
                        stage: "train",
                        step: global,
                        detail: format!("epoch {epoch}: non-finite loss at s = {}", s.as_f64()),
                    });
                }
                epoch_loss += loss;
                let two = T::lit(2.0);
                let cotangent = resid.map(|r| two * r * inv_n * inv_batch);
                model.backward(&x_s, &cache, &cotangent, Some(&mut grads))?;
            }
            adam.step(model.params_mut(), &grads)
                .map_err(|e| SonicError::Diverged {
                    stage: "train",
                    step: global,
                    detail: e.to_string(),
                })?;
        }
        epoch_losses.push(epoch_loss / (config.steps_per_epoch * config.batch_size) as f64);
    }
    Ok((model, TrainReport { epoch_losses }))
}
