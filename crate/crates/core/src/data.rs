//! Procedural scenes, inpainting masks, and the dataset manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::fields::{gaussian_field, Field, MaskField, SeedRng, Shape};
use crate::flow::ClassId;
use crate::io::write_atomic;
use crate::scalar::Scalar;
use crate::spectral::{dft2, idft2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Blobs,
    Checker,
    Bandlimited,
    Stripes,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Blobs,
        SceneKind::Checker,
        SceneKind::Bandlimited,
        SceneKind::Stripes,
    ];

    /// Class label used for conditional models (1-based; 0 is the null
    /// class).
    pub fn class_id(self) -> ClassId {
        ClassId(match self {
            SceneKind::Blobs => 1,
            SceneKind::Checker => 2,
            SceneKind::Bandlimited => 3,
            SceneKind::Stripes => 4,
        })
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SceneKind::Blobs => "blobs",
            SceneKind::Checker => "checker",
            SceneKind::Bandlimited => "bandlimited",
            SceneKind::Stripes => "stripes",
        })
    }
}

impl FromStr for SceneKind {
    type Err = SonicError;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| SonicError::config("scene", format!("unknown scene kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    HalfBox,
    SixRects,
    Blob,
}

impl MaskKind {
    pub const ALL: [MaskKind; 3] = [MaskKind::HalfBox, MaskKind::SixRects, MaskKind::Blob];
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskKind::HalfBox => "half_box",
            MaskKind::SixRects => "six_rects",
            MaskKind::Blob => "blob",
        })
    }
}

impl FromStr for MaskKind {
    type Err = SonicError;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| SonicError::config("mask", format!("unknown mask kind `{s}`")))
    }
}

/// A scene of the given kind with every value in `[0, 1]`.
pub fn gen_scene<T: Scalar>(kind: SceneKind, rng: &mut SeedRng, shape: Shape) -> Result<Field<T>> {
    shape.validate()?;
    let out = match kind {
        SceneKind::Blobs => blobs(rng, shape),
        SceneKind::Checker => {
            let max_period = (shape.height.min(shape.width) / 2).max(4);
            let period = 2 * rng.int_inclusive(2, max_period / 2);
            checker(rng, shape, period)
        }
        SceneKind::Bandlimited => bandlimited(rng, shape)?,
        SceneKind::Stripes => stripes(rng, shape),
    };
    Ok(out.cast())
}

fn blobs(rng: &mut SeedRng, shape: Shape) -> Field<f64> {
    let (h, w) = (shape.height as f64, shape.width as f64);
    let size = h.min(w);
    let count = rng.int_inclusive(2, 5);
    let bumps: Vec<(f64, f64, f64, Vec<f64>)> = (0..count)
        .map(|_| {
            let cy = rng.range(0.0, h);
            let cx = rng.range(0.0, w);
            let sigma = rng.range(size / 12.0, size / 4.0);
            let amp = (0..shape.channels).map(|_| rng.range(0.3, 1.0)).collect();
            (cy, cx, sigma, amp)
        })
        .collect();
    Field::from_raw(
        shape,
        (0..shape.len())
            .map(|i| {
                let c = i / shape.plane();
                let (y, x) = ((i % shape.plane()) / shape.width, i % shape.width);
                let v: f64 = bumps
                    .iter()
                    .map(|(cy, cx, sigma, amp)| {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        amp[c] * (-d2 / (2.0 * sigma * sigma)).exp()
                    })
                    .sum();
                v.clamp(0.0, 1.0)
            })
            .collect(),
    )
}

/// Checkerboard with the given full period (two squares of `period / 2`
/// pixels), random phase and random light/dark levels per channel.
pub fn checker(rng: &mut SeedRng, shape: Shape, period: usize) -> Field<f64> {
    let half = (period / 2).max(1);
    let py = rng.int_inclusive(0, period - 1);
    let px = rng.int_inclusive(0, period - 1);
    let levels: Vec<(f64, f64)> = (0..shape.channels)
        .map(|_| (rng.range(0.0, 0.3), rng.range(0.7, 1.0)))
        .collect();
    Field::from_raw(
        shape,
        (0..shape.len())
            .map(|i| {
                let c = i / shape.plane();
                let (y, x) = ((i % shape.plane()) / shape.width, i % shape.width);
                let parity = ((y + py) / half + (x + px) / half) % 2;
                if parity == 0 {
                    levels[c].0
                } else {
                    levels[c].1
                }
            })
            .collect(),
    )
}

/// White noise keeping only frequencies up to a quarter of the Nyquist
/// radius, min-max rescaled to `[0, 1]` per channel.
fn bandlimited(rng: &mut SeedRng, shape: Shape) -> Result<Field<f64>> {
    let noise: Field = gaussian_field(rng, shape)?;
    let mut spectrum = dft2(&noise)?;
    let (h, w) = (shape.height, shape.width);
    for c in 0..shape.channels {
        for u in 0..h {
            for v in 0..w {
                let fu = u.min(h - u) as f64 / h as f64;
                let fv = v.min(w - v) as f64 / w as f64;
                if (fu * fu + fv * fv).sqrt() > 0.125 {
                    spectrum.set(c, u, v, num_complex::Complex::new(0.0, 0.0));
                }
            }
        }
    }
    let mut smooth = idft2(&spectrum)?;
    for c in 0..shape.channels {
        let ch = smooth.channel_mut(c);
        let lo = ch.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in ch.iter_mut() {
            *v = if span > 0.0 {
                ((*v - lo) / span).clamp(0.0, 1.0)
            } else {
                0.5
            };
        }
    }
    Ok(smooth)
}

fn stripes(rng: &mut SeedRng, shape: Shape) -> Field<f64> {
    let size = shape.height.min(shape.width) as f64;
    let theta = rng.range(0.0, std::f64::consts::PI);
    let period = rng.range(4.0, (size / 2.0).max(4.0));
    let phase = rng.range(0.0, 2.0 * std::f64::consts::PI);
    let contrast: Vec<f64> = (0..shape.channels).map(|_| rng.range(0.5, 1.0)).collect();
    let (ky, kx) = (theta.sin(), theta.cos());
    Field::from_raw(
        shape,
        (0..shape.len())
            .map(|i| {
                let c = i / shape.plane();
                let (y, x) = ((i % shape.plane()) / shape.width, i % shape.width);
                let t =
                    2.0 * std::f64::consts::PI * (ky * y as f64 + kx * x as f64) / period + phase;
                (0.5 + 0.5 * contrast[c] * t.sin()).clamp(0.0, 1.0)
            })
            .collect(),
    )
}

/// Axis-aligned rectangle `[y, y + h) × [x, x + w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

fn fit_error(kind: MaskKind, height: usize, width: usize, need: &str) -> SonicError {
    SonicError::config(
        "mask",
        format!("{kind} does not fit a {height}x{width} grid ({need})"),
    )
}

/// The six rectangles of a `six_rects` mask, each side within
/// `[size/8, size/3]` of the matching dimension.
pub fn six_rects(rng: &mut SeedRng, height: usize, width: usize) -> Result<Vec<Rect>> {
    if height < 8 || width < 8 {
        return Err(fit_error(
            MaskKind::SixRects,
            height,
            width,
            "needs at least 8x8",
        ));
    }
    let side = |rng: &mut SeedRng, n: usize| rng.int_inclusive(n.div_ceil(8), n / 3);
    Ok((0..6)
        .map(|_| {
            let h = side(rng, height);
            let w = side(rng, width);
            Rect {
                y: rng.int_inclusive(0, height - h),
                x: rng.int_inclusive(0, width - w),
                h,
                w,
            }
        })
        .collect())
}

/// An observation mask (true = observed).
pub fn gen_mask(
    kind: MaskKind,
    rng: &mut SeedRng,
    height: usize,
    width: usize,
) -> Result<MaskField> {
    match kind {
        MaskKind::HalfBox => {
            if height < 2 {
                return Err(fit_error(kind, height, width, "needs at least 2 rows"));
            }
            let first_hidden = height - height.div_ceil(2);
            MaskField::from_fn(height, width, |y, _| y < first_hidden)
        }
        MaskKind::SixRects => {
            let rects = six_rects(rng, height, width)?;
            MaskField::from_fn(height, width, |y, x| {
                !rects
                    .iter()
                    .any(|r| (r.y..r.y + r.h).contains(&y) && (r.x..r.x + r.w).contains(&x))
            })
        }
        MaskKind::Blob => {
            if height < 4 || width < 4 {
                return Err(fit_error(kind, height, width, "needs at least 4x4"));
            }
            blob_mask(rng, height, width)
        }
    }
}

/// Hides the highest `q` fraction (q uniform in [0.2, 0.5]) of a smoothed
/// noise field.
fn blob_mask(rng: &mut SeedRng, height: usize, width: usize) -> Result<MaskField> {
    let shape = Shape::new(1, height, width);
    let noise: Field = gaussian_field(rng, shape)?;
    let sigma = height.min(width) as f64 / 8.0;
    let mut spectrum = dft2(&noise)?;
    for u in 0..height {
        for v in 0..width {
            let fu = u.min(height - u) as f64 / height as f64;
            let fv = v.min(width - v) as f64 / width as f64;
            let gain = (-2.0 * (std::f64::consts::PI * sigma).powi(2) * (fu * fu + fv * fv)).exp();
            let z = spectrum.get(0, u, v);
            spectrum.set(0, u, v, z * gain);
        }
    }
    let smooth = idft2(&spectrum)?;
    let fraction = rng.range(0.2, 0.5);
    let hidden =
        ((fraction * (height * width) as f64).round() as usize).clamp(1, height * width - 1);
    let mut order: Vec<usize> = (0..height * width).collect();
    order.sort_by(|&a, &b| {
        smooth.data()[b]
            .total_cmp(&smooth.data()[a])
            .then(a.cmp(&b))
    });
    let mut bits = vec![true; height * width];
    for &i in &order[..hidden] {
        bits[i] = false;
    }
    MaskField::new(height, width, bits)
}

/// One generated scene/mask pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance<T = f64> {
    pub id: usize,
    pub seed: u64,
    pub scene_kind: SceneKind,
    pub mask_kind: MaskKind,
    pub image: Field<T>,
    pub mask: MaskField,
}

/// `count` instances cycling through `scenes`, each drawn from its own
/// stream of `base_seed`.
pub fn gen_instances<T: Scalar>(
    count: usize,
    base_seed: u64,
    shape: Shape,
    scenes: &[SceneKind],
    mask_kind: MaskKind,
) -> Result<Vec<Instance<T>>> {
    if scenes.is_empty() {
        return Err(SonicError::config(
            "scene",
            "at least one scene kind is required",
        ));
    }
    let base = SeedRng::new(base_seed);
    (0..count)
        .map(|id| {
            let mut rng = base.fork(id as u64);
            let scene_kind = scenes[id % scenes.len()];
            let image = gen_scene(scene_kind, &mut rng, shape)?;
            let mask = gen_mask(mask_kind, &mut rng, shape.height, shape.width)?;
            Ok(Instance {
                id,
                seed: rng.seed(),
                scene_kind,
                mask_kind,
                image,
                mask,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    /// Relative to the manifest's directory.
    pub scene_file: PathBuf,
    pub mask_file: PathBuf,
    pub seed: u64,
    pub scene_kind: SceneKind,
    pub mask_kind: MaskKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub shape: Shape,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn autocorr(f: &Field, lag: usize) -> f64 {
        let s = f.shape();
        let m = f.mean();
        let mut acc = 0.0;
        for y in 0..s.height {
            for x in 0..s.width - lag {
                acc += (f.get(0, y, x) - m) * (f.get(0, y, x + lag) - m);
            }
        }
        acc
    }

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        let shape = Shape::new(3, 16, 24);
        for kind in SceneKind::ALL {
            for seed in 0..5 {
                let a: Field = gen_scene(kind, &mut SeedRng::new(seed), shape).unwrap();
                let b: Field = gen_scene(kind, &mut SeedRng::new(seed), shape).unwrap();
                assert_eq!(a, b);
                assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
            }
        }
    }

    #[test]
    fn checker_period_four_autocorrelation() {
        let f = checker(&mut SeedRng::new(3), Shape::new(1, 16, 16), 4);
        assert!(autocorr(&f, 4) > autocorr(&f, 2));
    }

    #[test]
    fn half_box_layout() {
        let m = gen_mask(MaskKind::HalfBox, &mut SeedRng::new(0), 32, 32).unwrap();
        assert_eq!(m.unobserved_count(), 512);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(m.get(y, x), y < 16);
            }
        }
        let odd = gen_mask(MaskKind::HalfBox, &mut SeedRng::new(0), 5, 3).unwrap();
        assert_eq!(odd.unobserved_count(), 9);
    }

    #[test]
    fn six_rects_sizes_and_mask() {
        for seed in 0..20 {
            let rects = six_rects(&mut SeedRng::new(seed), 32, 32).unwrap();
            assert_eq!(rects.len(), 6);
            for r in &rects {
                assert!((4..=10).contains(&r.h) && (4..=10).contains(&r.w));
                assert!(r.y + r.h <= 32 && r.x + r.w <= 32);
            }
            let m = gen_mask(MaskKind::SixRects, &mut SeedRng::new(seed), 32, 32).unwrap();
            assert!(m.observed_count() >= 1 && m.unobserved_count() >= 1);
        }
        assert!(gen_mask(MaskKind::SixRects, &mut SeedRng::new(0), 7, 32).is_err());
    }

    #[test]
    fn blob_fraction_in_range() {
        for seed in 0..20 {
            let m = gen_mask(MaskKind::Blob, &mut SeedRng::new(seed), 32, 32).unwrap();
            let frac = m.unobserved_count() as f64 / 1024.0;
            assert!((0.2..=0.5).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn kinds_parse() {
        for k in SceneKind::ALL {
            assert_eq!(k.to_string().parse::<SceneKind>().unwrap(), k);
        }
        for k in MaskKind::ALL {
            assert_eq!(k.to_string().parse::<MaskKind>().unwrap(), k);
        }
        assert!("plaid".parse::<SceneKind>().is_err());
    }
}
