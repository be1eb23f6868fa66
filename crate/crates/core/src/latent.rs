//! Observation pathway: nearest-neighbor fill of masked pixels, a linear
//! stand-in encoder/decoder, and derivation of the latent-resolution mask.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::fields::{Field, MaskField, Shape};
use crate::scalar::Scalar;

/// Fills every unobserved pixel with the value of the nearest observed pixel
/// (Euclidean pixel distance). Ties go to the candidate with the smallest
/// `(row, column)`. Observed pixels are copied unchanged.
pub fn nn_fill<T: Scalar>(image: &Field<T>, mask: &MaskField) -> Result<Field<T>> {
    mask.ensure_matches(image.shape())?;
    if mask.observed_count() == 0 {
        return Err(SonicError::NoObservedPixels);
    }
    let (h, w) = (mask.height(), mask.width());
    let sources = nearest_observed(mask);
    let mut out = image.clone();
    for c in 0..image.shape().channels {
        let src = image.channel(c);
        let dst = out.channel_mut(c);
        for p in 0..h * w {
            if !mask.observed_at(p) {
                dst[p] = src[sources[p]];
            }
        }
    }
    Ok(out)
}

/// Index of the nearest observed pixel for every pixel (itself when
/// observed). Searches square rings of growing Chebyshev radius and stops
/// once the ring can no longer beat the best squared distance found.
fn nearest_observed(mask: &MaskField) -> Vec<usize> {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let mut out = vec![0usize; (h * w) as usize];
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as usize;
            if mask.observed_at(p) {
                out[p] = p;
                continue;
            }
            let mut best: Option<(isize, usize)> = None;
            let max_r = h.max(w);
            for r in 1..=max_r {
                if let Some((d2, _)) = best {
                    if r * r > d2 {
                        break;
                    }
                }
                let mut consider = |yy: isize, xx: isize| {
                    if yy < 0 || yy >= h || xx < 0 || xx >= w {
                        return;
                    }
                    let q = (yy * w + xx) as usize;
                    if !mask.observed_at(q) {
                        return;
                    }
                    let d2 = (yy - y) * (yy - y) + (xx - x) * (xx - x);
                    match best {
                        Some((bd, bq)) if d2 > bd || (d2 == bd && q >= bq) => {}
                        _ => best = Some((d2, q)),
                    }
                };
                for xx in x - r..=x + r {
                    consider(y - r, xx);
                    consider(y + r, xx);
                }
                for yy in y - r + 1..y + r {
                    consider(yy, x - r);
                    consider(yy, x + r);
                }
            }
            out[p] = best.expect("mask has an observed pixel").1;
        }
    }
    out
}

/// Linear stand-in for an autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
#[derive(Default)]
pub enum LatentCodec {
    /// Latent = image.
    #[default]
    Identity,
    /// `f×f` average pooling down, nearest-neighbor upsampling back.
    Pool(usize),
}

impl fmt::Display for LatentCodec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LatentCodec::Identity => write!(f, "identity"),
            LatentCodec::Pool(k) => write!(f, "pool:{k}"),
        }
    }
}

impl FromStr for LatentCodec {
    type Err = SonicError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(LatentCodec::Identity);
        }
        if let Some(k) = s.strip_prefix("pool:") {
            let k: usize = k
                .parse()
                .map_err(|_| SonicError::config("codec", format!("bad pool factor in `{s}`")))?;
            if k == 0 {
                return Err(SonicError::config("codec", "pool factor must be >= 1"));
            }
            return Ok(LatentCodec::Pool(k));
        }
        Err(SonicError::config(
            "codec",
            format!("expected `identity` or `pool:<f>`, got `{s}`"),
        ))
    }
}

impl From<LatentCodec> for String {
    fn from(c: LatentCodec) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for LatentCodec {
    type Error = SonicError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl LatentCodec {
    fn factor(&self) -> usize {
        match *self {
            LatentCodec::Identity => 1,
            LatentCodec::Pool(f) => f,
        }
    }

    fn check_divides(&self, height: usize, width: usize) -> Result<()> {
        let f = self.factor();
        if f == 0 || !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(SonicError::config(
                "codec",
                format!("pool factor {f} does not divide {height}x{width}"),
            ));
        }
        Ok(())
    }

    pub fn latent_shape(&self, image: Shape) -> Result<Shape> {
        self.check_divides(image.height, image.width)?;
        let f = self.factor();
        Ok(Shape::new(
            image.channels,
            image.height / f,
            image.width / f,
        ))
    }

    pub fn encode<T: Scalar>(&self, image: &Field<T>) -> Result<Field<T>> {
        let out_shape = self.latent_shape(image.shape())?;
        let f = self.factor();
        if f == 1 {
            return Ok(image.clone());
        }
        let inv = T::lit(1.0 / (f * f) as f64);
        Field::from_fn(out_shape, |c, y, x| {
            let mut acc = T::zero();
            for dy in 0..f {
                for dx in 0..f {
                    acc += image.get(c, y * f + dy, x * f + dx);
                }
            }
            acc * inv
        })
    }

    pub fn decode<T: Scalar>(&self, latent: &Field<T>) -> Result<Field<T>> {
        let f = self.factor();
        if f == 1 {
            return Ok(latent.clone());
        }
        let s = latent.shape();
        Field::from_fn(
            Shape::new(s.channels, s.height * f, s.width * f),
            |c, y, x| latent.get(c, y / f, x / f),
        )
    }

    /// A latent cell counts as observed only when every image pixel it
    /// covers is observed.
    pub fn latent_mask(&self, mask: &MaskField) -> Result<MaskField> {
        self.check_divides(mask.height(), mask.width())?;
        let f = self.factor();
        if f == 1 {
            return Ok(mask.clone());
        }
        MaskField::from_fn(mask.height() / f, mask.width() / f, |y, x| {
            (0..f).all(|dy| (0..f).all(|dx| mask.get(y * f + dy, x * f + dx)))
        })
    }
}

/// A masked image brought into latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation<T = f64> {
    pub y_latent: Field<T>,
    pub latent_mask: MaskField,
    pub source_mask: MaskField,
    pub filled_image: Field<T>,
}

impl<T: Scalar> Observation<T> {
    pub fn latent_shape(&self) -> Shape {
        self.y_latent.shape()
    }

    pub fn validate(&self) -> Result<()> {
        self.latent_mask.ensure_matches(self.y_latent.shape())?;
        self.source_mask.ensure_matches(self.filled_image.shape())
    }
}

/// Fills unobserved pixels from their nearest observed neighbor, then
/// encodes.
pub fn encode_observation<T: Scalar>(
    codec: LatentCodec,
    image: &Field<T>,
    mask: &MaskField,
) -> Result<Observation<T>> {
    codec.check_divides(image.shape().height, image.shape().width)?;
    let filled = nn_fill(image, mask)?;
    build_observation(codec, filled, mask)
}

/// Encodes the complete ground-truth image instead of the filled one. The
/// latent mask is derived exactly as in [`encode_observation`].
pub fn encode_ground_truth<T: Scalar>(
    codec: LatentCodec,
    ground_truth: &Field<T>,
    mask: &MaskField,
) -> Result<Observation<T>> {
    mask.ensure_matches(ground_truth.shape())?;
    build_observation(codec, ground_truth.clone(), mask)
}

fn build_observation<T: Scalar>(
    codec: LatentCodec,
    filled: Field<T>,
    mask: &MaskField,
) -> Result<Observation<T>> {
    let y_latent = codec.encode(&filled)?;
    let latent_mask = codec.latent_mask(mask)?;
    Ok(Observation {
        y_latent,
        latent_mask,
        source_mask: mask.clone(),
        filled_image: filled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gaussian_field, SeedRng};

    fn brute_force_fill(image: &Field<f64>, mask: &MaskField) -> Field<f64> {
        let (h, w) = (mask.height(), mask.width());
        let mut out = image.clone();
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    continue;
                }
                let mut best = (usize::MAX, 0, 0);
                for yy in 0..h {
                    for xx in 0..w {
                        if !mask.get(yy, xx) {
                            continue;
                        }
                        let d = yy.abs_diff(y).pow(2) + xx.abs_diff(x).pow(2);
                        if d < best.0 {
                            best = (d, yy, xx);
                        }
                    }
                }
                for c in 0..image.shape().channels {
                    out.set(c, y, x, image.get(c, best.1, best.2));
                }
            }
        }
        out
    }

    #[test]
    fn fill_examples() {
        let shape = Shape::new(1, 3, 3);
        let img: Field = gaussian_field(&mut SeedRng::new(1), shape).unwrap();
        let full = MaskField::ones(3, 3).unwrap();
        assert_eq!(nn_fill(&img, &full).unwrap(), img);

        let single = MaskField::from_fn(3, 3, |y, x| y == 1 && x == 2).unwrap();
        let mut img2 = img.clone();
        img2.set(0, 1, 2, 0.7);
        assert!(nn_fill(&img2, &single)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.7));

        let corners =
            MaskField::from_fn(3, 3, |y, x| (y, x) == (0, 0) || (y, x) == (2, 2)).unwrap();
        let mut img3 = Field::zeros(shape).unwrap();
        img3.set(0, 0, 0, 1.0);
        img3.set(0, 2, 2, 5.0);
        assert_eq!(nn_fill(&img3, &corners).unwrap().get(0, 1, 1), 1.0);

        assert!(matches!(
            nn_fill(&img, &MaskField::zeros(3, 3).unwrap()),
            Err(SonicError::NoObservedPixels)
        ));
    }

    #[test]
    fn ring_search_matches_brute_force() {
        for seed in 0..40 {
            let mut rng = SeedRng::new(seed);
            let (h, w) = (rng.int_inclusive(1, 9), rng.int_inclusive(1, 9));
            let density = rng.range(0.02, 0.6);
            let mut bits: Vec<bool> = (0..h * w).map(|_| rng.uniform() < density).collect();
            if !bits.contains(&true) {
                bits[(h / 2) * w + w / 2] = true;
            }
            let mask = MaskField::new(h, w, bits).unwrap();
            let img: Field = gaussian_field(&mut rng, Shape::new(2, h, w)).unwrap();
            assert_eq!(
                nn_fill(&img, &mask).unwrap(),
                brute_force_fill(&img, &mask),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn pool_codec_examples() {
        let codec = LatentCodec::Pool(2);
        let shape = Shape::new(1, 4, 4);
        let constant = Field::filled(shape, 0.3).unwrap();
        let z = codec.encode(&constant).unwrap();
        assert_eq!(z.shape(), Shape::new(1, 2, 2));
        assert!(z.data().iter().all(|&v: &f64| (v - 0.3).abs() < 1e-15));

        let mask = MaskField::from_fn(4, 4, |y, x| !(y == 1 && x == 0)).unwrap();
        let obs = encode_observation(codec, &constant, &mask).unwrap();
        assert_eq!(obs.latent_mask.bits(), &[false, true, true, true]);

        let x: Field = gaussian_field(&mut SeedRng::new(4), shape).unwrap();
        let round = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                let (by, bx) = (y / 2 * 2, xx / 2 * 2);
                let mean = (x.get(0, by, bx)
                    + x.get(0, by + 1, bx)
                    + x.get(0, by, bx + 1)
                    + x.get(0, by + 1, bx + 1))
                    / 4.0;
                assert!((round.get(0, y, xx) - mean).abs() < 1e-15);
            }
        }
        let zz: Field = gaussian_field(&mut SeedRng::new(5), Shape::new(1, 2, 2)).unwrap();
        assert_eq!(codec.encode(&codec.decode(&zz).unwrap()).unwrap(), zz);
    }

    #[test]
    fn identity_codec_passes_through() {
        let shape = Shape::new(2, 4, 3);
        let img: Field = gaussian_field(&mut SeedRng::new(2), shape).unwrap();
        let mask = MaskField::from_fn(4, 3, |y, _| y < 2).unwrap();
        let obs = encode_observation(LatentCodec::Identity, &img, &mask).unwrap();
        assert_eq!(obs.y_latent, obs.filled_image);
        assert_eq!(obs.latent_mask, mask);
        assert_eq!(LatentCodec::Identity.decode(&img).unwrap(), img);
    }

    #[test]
    fn indivisible_pool_rejected() {
        let img = Field::<f64>::zeros(Shape::new(1, 5, 4)).unwrap();
        let mask = MaskField::ones(5, 4).unwrap();
        assert!(encode_observation(LatentCodec::Pool(2), &img, &mask).is_err());
    }

    #[test]
    fn codec_parsing() {
        assert_eq!(
            "identity".parse::<LatentCodec>().unwrap(),
            LatentCodec::Identity
        );
        assert_eq!(
            "pool:4".parse::<LatentCodec>().unwrap(),
            LatentCodec::Pool(4)
        );
        assert!("pool:0".parse::<LatentCodec>().is_err());
        assert!("vae".parse::<LatentCodec>().is_err());
        assert_eq!(LatentCodec::Pool(2).to_string(), "pool:2");
    }
}
