//! Blended denoising from an optimized seed and the end-to-end inpainting
//! pipeline.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SonicError};
use crate::fields::{Field, MaskField, SeedRng, RNG_ALGORITHM};
use crate::flow::{euler_step, GuidanceConfig, SamplerConfig, VelocityModel};
use crate::latent::{encode_ground_truth, encode_observation, LatentCodec, Observation};
use crate::scalar::Scalar;
use crate::seedopt::{optimize_seed, OptTrace, OptimConfig};

/// Euler sampling from `x_t` in which, after each step landing at time
/// `s`, the observed latent cells are overwritten with
/// `s * x_t + (1 - s) * y`. The forward noising reuses the seed itself, so
/// the last blend (at `s = 0`) leaves exactly `y` on observed cells.
pub fn blended_denoise<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    x_t: &Field<T>,
    observation: &Observation<T>,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
) -> Result<Field<T>> {
    observation.validate()?;
    sampler.validate()?;
    guidance.validate()?;
    x_t.ensure_same_shape(&observation.y_latent, "blended denoise seed")?;
    if !x_t.is_finite() {
        return Err(SonicError::NonFinite("initial seed".into()));
    }
    let mask = &observation.latent_mask;
    let plane = x_t.shape().plane();
    let y = observation.y_latent.data();
    let seed = x_t.data();
    let mut x = x_t.clone();
    for k in 0..sampler.steps {
        x = euler_step(model, &x, k, sampler, guidance)?;
        let s = sampler.time::<T>(k + 1);
        let one_minus = T::one() - s;
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            if mask.observed_at(i % plane) {
                *v = s * seed[i] + one_minus * y[i];
            }
        }
    }
    Ok(x)
}

/// `mask * image + (1 - mask) * decoded`, by selection.
pub fn paste_observed<T: Scalar>(
    decoded: &Field<T>,
    image: &Field<T>,
    mask: &MaskField,
) -> Result<Field<T>> {
    decoded.ensure_same_shape(image, "paste")?;
    mask.ensure_matches(image.shape())?;
    let plane = image.shape().plane();
    let mut out = decoded.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if mask.observed_at(i % plane) {
            *v = image.data()[i];
        }
    }
    Ok(out)
}

/// What the encoder sees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInput {
    /// The masked image with holes filled from the nearest observed pixel.
    #[default]
    NnFill,
    /// The unmasked ground truth (an upper bound, not a usable method).
    GroundTruth,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    pub codec: LatentCodec,
    pub encoder_input: EncoderInput,
    pub sampler: SamplerConfig,
    pub guidance: GuidanceConfig,
    pub optim: OptimConfig,
    /// Seed of the initial Gaussian sample.
    pub seed: u64,
}

impl InpaintConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.guidance.validate()?;
        self.optim.validate()
    }

    /// SHA-256 of the config's JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintMetadata {
    pub iterations: usize,
    pub seed: u64,
    pub rng: String,
    pub config_hash: String,
    pub config: InpaintConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintResult<T = f64> {
    /// Decoded output with observed pixels pasted back.
    pub image: Field<T>,
    /// Final latent of the blended sampler.
    pub latent: Field<T>,
    /// Optimized seed the sampler started from.
    pub seed: Field<T>,
    pub observation: Observation<T>,
    pub metadata: InpaintMetadata,
}

/// Encode, optimize the seed, blend-denoise from it, decode, paste.
///
/// With [`EncoderInput::GroundTruth`], `image` must be the complete ground
/// truth.
pub fn sonic_inpaint<T: Scalar, M: VelocityModel<T> + ?Sized>(
    model: &M,
    image: &Field<T>,
    mask: &MaskField,
    config: &InpaintConfig,
) -> Result<(InpaintResult<T>, OptTrace)> {
    config.validate()?;
    let observation = match config.encoder_input {
        EncoderInput::NnFill => encode_observation(config.codec, image, mask)?,
        EncoderInput::GroundTruth => encode_ground_truth(config.codec, image, mask)?,
    };
    let mut rng = SeedRng::new(config.seed);
    let (state, trace) = optimize_seed(
        model,
        &observation,
        &config.sampler,
        &config.guidance,
        &config.optim,
        &mut rng,
    )?;
    let latent = blended_denoise(
        model,
        state.seed(),
        &observation,
        &config.sampler,
        &config.guidance,
    )?;
    let decoded = config.codec.decode(&latent)?;
    let out = paste_observed(&decoded, image, mask)?;
    let result = InpaintResult {
        image: out,
        latent,
        seed: state.seed().clone(),
        observation,
        metadata: InpaintMetadata {
            iterations: config.optim.iterations,
            seed: config.seed,
            rng: RNG_ALGORITHM.to_string(),
            config_hash: config.hash(),
            config: *config,
        },
    };
    Ok((result, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gaussian_field, Shape};
    use crate::flow::{denoise, ConstantVelocity, DiracVelocity};

    fn setup(mask: MaskField) -> (Observation<f64>, Field<f64>, DiracVelocity<f64>) {
        let shape = Shape::new(2, 6, 6);
        let image: Field =
            Field::from_fn(shape, |c, y, x| 0.1 * (c + y) as f64 - 0.05 * x as f64).unwrap();
        let obs = encode_observation(LatentCodec::Identity, &image, &mask).unwrap();
        let x_t = gaussian_field(&mut SeedRng::new(5), shape).unwrap();
        let model = DiracVelocity::new(Field::filled(shape, 0.3).unwrap());
        (obs, x_t, model)
    }

    #[test]
    fn full_mask_returns_observation() {
        let (obs, x_t, model) = setup(MaskField::ones(6, 6).unwrap());
        let out = blended_denoise(
            &model,
            &x_t,
            &obs,
            &SamplerConfig::default(),
            &GuidanceConfig::default(),
        )
        .unwrap();
        assert_eq!(out, obs.y_latent);
    }

    #[test]
    fn empty_mask_matches_plain_denoise() {
        let (mut obs, x_t, _) = setup(MaskField::ones(6, 6).unwrap());
        obs.latent_mask = MaskField::zeros(6, 6).unwrap();
        let model = ConstantVelocity::new(Field::filled(x_t.shape(), -0.25).unwrap());
        let sampler = SamplerConfig::new(7).unwrap();
        let out =
            blended_denoise(&model, &x_t, &obs, &sampler, &GuidanceConfig::default()).unwrap();
        let plain = denoise(&model, &x_t, &sampler, &GuidanceConfig::default())
            .unwrap()
            .x0;
        assert_eq!(out, plain);
    }

    #[test]
    fn observed_cells_match_at_end() {
        let mask = MaskField::from_fn(6, 6, |y, x| (y + x) % 3 != 0).unwrap();
        let (obs, x_t, model) = setup(mask.clone());
        let out = blended_denoise(
            &model,
            &x_t,
            &obs,
            &SamplerConfig::new(5).unwrap(),
            &GuidanceConfig::default(),
        )
        .unwrap();
        for c in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    if mask.get(y, x) {
                        assert!((out.get(c, y, x) - obs.y_latent.get(c, y, x)).abs() <= 1e-10);
                    } else {
                        assert!((out.get(c, y, x) - 0.3).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn paste_examples() {
        let shape = Shape::new(1, 3, 3);
        let a: Field = gaussian_field(&mut SeedRng::new(1), shape).unwrap();
        let b: Field = gaussian_field(&mut SeedRng::new(2), shape).unwrap();
        assert_eq!(
            paste_observed(&a, &b, &MaskField::ones(3, 3).unwrap()).unwrap(),
            b
        );
        assert_eq!(
            paste_observed(&a, &b, &MaskField::zeros(3, 3).unwrap()).unwrap(),
            a
        );
        let m = MaskField::from_fn(3, 3, |y, _| y == 1).unwrap();
        let once = paste_observed(&a, &b, &m).unwrap();
        assert_eq!(paste_observed(&once, &b, &m).unwrap(), once);
        assert!(paste_observed(&a, &b, &MaskField::ones(2, 3).unwrap()).is_err());
    }

    #[test]
    fn full_mask_pipeline_is_identity() {
        let shape = Shape::new(1, 8, 8);
        let image: Field = Field::from_fn(shape, |_, y, x| (y * 8 + x) as f64 / 64.0).unwrap();
        let model = DiracVelocity::new(Field::filled(shape, 0.5).unwrap());
        let config = InpaintConfig {
            optim: OptimConfig {
                iterations: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let (res, trace) =
            sonic_inpaint(&model, &image, &MaskField::ones(8, 8).unwrap(), &config).unwrap();
        assert_eq!(res.image, image);
        assert_eq!(trace.records.len(), 4);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = InpaintConfig::default();
        assert_eq!(a.hash(), InpaintConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
        let b = InpaintConfig { seed: 1, ..a };
        assert_ne!(a.hash(), b.hash());
        let json = serde_json::to_string(&a).unwrap();
        assert!(json.contains("\"lr\":3.0"));
        assert!(json.contains("\"steps\":20"));
        assert!(json.contains("\"scale\":2.0"));
        let back: InpaintConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}
