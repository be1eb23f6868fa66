//! Reference-based image metrics and a spectral whiteness diagnostic for
//! seeds.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::fields::{Field, MaskField};
use crate::scalar::Scalar;
use crate::spectral::dft2;

/// Returned by [`psnr`] when the two images are identical.
pub const PSNR_CAP: f64 = 999.0;

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

fn check_peak(peak: f64) -> Result<()> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(SonicError::config(
            "peak",
            format!("must be positive, got {peak}"),
        ));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Field<T>, b: &Field<T>) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(peak^2 / MSE)`, or [`PSNR_CAP`] when the MSE is zero.
pub fn psnr<T: Scalar>(a: &Field<T>, b: &Field<T>, peak: f64) -> Result<f64> {
    check_peak(peak)?;
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Odd window side.
    pub window: usize,
    pub sigma: f64,
    pub peak: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            peak: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn with_window(self, window: usize) -> Self {
        SsimConfig { window, ..self }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.peak).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.peak).powi(2)
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        check_peak(self.peak)?;
        if self.window.is_multiple_of(2) || self.window == 0 {
            return Err(SonicError::config(
                "window",
                format!("must be odd, got {}", self.window),
            ));
        }
        if self.window > height.min(width) {
            return Err(SonicError::config(
                "window",
                format!("{} exceeds image size {height}x{width}", self.window),
            ));
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(SonicError::config("sigma", "must be positive"));
        }
        Ok(())
    }

    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = g.iter().sum();
        let mut k = Vec::with_capacity(self.window * self.window);
        for gy in &g {
            for gx in &g {
                k.push(gy * gx / (total * total));
            }
        }
        k
    }
}

/// SSIM of the window with top-left corner `(y, x)` in channel `c`.
fn window_ssim<T: Scalar>(
    a: &Field<T>,
    b: &Field<T>,
    c: usize,
    y: usize,
    x: usize,
    cfg: &SsimConfig,
    kernel: &[f64],
) -> f64 {
    let n = cfg.window;
    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in 0..n {
        for dx in 0..n {
            let w = kernel[dy * n + dx];
            let p = a.get(c, y + dy, x + dx).as_f64();
            let q = b.get(c, y + dy, x + dx).as_f64();
            ma += w * p;
            mb += w * q;
            saa += w * p * p;
            sbb += w * q * q;
            sab += w * p * q;
        }
    }
    let va = saa - ma * ma;
    let vb = sbb - mb * mb;
    let cov = sab - ma * mb;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean SSIM over every window position fully inside the image, averaged
/// over channels, with Gaussian-weighted window statistics.
pub fn ssim<T: Scalar>(a: &Field<T>, b: &Field<T>, cfg: &SsimConfig) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let s = a.shape();
    ssim_over(a, b, cfg, &MaskField::ones(s.height, s.width)?)
}

fn ssim_over<T: Scalar>(
    a: &Field<T>,
    b: &Field<T>,
    cfg: &SsimConfig,
    region: &MaskField,
) -> Result<f64> {
    let s = a.shape();
    cfg.validate(s.height, s.width)?;
    let kernel = cfg.kernel();
    let n = cfg.window;
    let inside = window_fits(region, n);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=s.height - n {
        for x in 0..=s.width - n {
            if !inside[y * (s.width - n + 1) + x] {
                continue;
            }
            for c in 0..s.channels {
                total += window_ssim(a, b, c, y, x, cfg, &kernel);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(SonicError::EmptyRegion);
    }
    Ok(total / count as f64)
}

/// For every top-left corner, whether the `n×n` window lies entirely on
/// set bits of `region`.
fn window_fits(region: &MaskField, n: usize) -> Vec<bool> {
    let (h, w) = (region.height(), region.width());
    // Summed-area table of set bits.
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                region.get(y, x) as usize + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x]
                    - sat[y * (w + 1) + x];
        }
    }
    let mut out = Vec::with_capacity((h - n + 1) * (w - n + 1));
    for y in 0..=h - n {
        for x in 0..=w - n {
            let sum = sat[(y + n) * (w + 1) + x + n] + sat[y * (w + 1) + x]
                - sat[y * (w + 1) + x + n]
                - sat[(y + n) * (w + 1) + x];
            out.push(sum == n * n);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Observed,
    Unobserved,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    Psnr { peak: f64 },
    Ssim(SsimConfig),
    Mse,
}

/// A metric restricted to one side of `mask`. PSNR and MSE use the region's
/// pixels; SSIM averages the windows lying entirely inside the region.
pub fn masked_metric<T: Scalar>(
    metric: Metric,
    a: &Field<T>,
    b: &Field<T>,
    mask: &MaskField,
    region: Region,
) -> Result<f64> {
    a.ensure_same_shape(b, "masked metric")?;
    mask.ensure_matches(a.shape())?;
    let selected = match region {
        Region::Observed => mask.clone(),
        Region::Unobserved => mask.inverted(),
    };
    if selected.observed_count() == 0 {
        return Err(SonicError::EmptyRegion);
    }
    match metric {
        Metric::Ssim(cfg) => ssim_over(a, b, &cfg, &selected),
        Metric::Psnr { peak } => {
            check_peak(peak)?;
            Ok(psnr_from_mse(region_mse(a, b, &selected), peak))
        }
        Metric::Mse => Ok(region_mse(a, b, &selected)),
    }
}

fn region_mse<T: Scalar>(a: &Field<T>, b: &Field<T>, selected: &MaskField) -> f64 {
    let plane = a.shape().plane();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if selected.observed_at(i % plane) {
            sum += (x.as_f64() - y.as_f64()).powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

pub const WHITENESS_BANDS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhitenessReport {
    /// Mean unitary power per radial band, lowest frequencies first.
    /// White standard-normal noise gives 1.0 in every band.
    pub band_means: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl WhitenessReport {
    pub fn max_band_deviation(&self) -> f64 {
        self.band_means
            .iter()
            .map(|m| (m - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn bands_within(&self, lo: f64, hi: f64) -> bool {
        self.band_means.iter().all(|m| (lo..=hi).contains(m))
    }
}

/// Splits the frequency plane into [`WHITENESS_BANDS`] radial bands holding
/// equal numbers of bins (sorted by normalized radius, ties by bin index)
/// and reports the mean power in each, pooled over channels.
pub fn whiteness_report<T: Scalar>(x: &Field<T>) -> Result<WhitenessReport> {
    let spectrum = dft2(x)?;
    let s = x.shape();
    let (h, w) = (s.height, s.width);
    let radius = |i: usize| {
        let (u, v) = (i / w, i % w);
        let fu = u.min(h - u) as f64 / h as f64;
        let fv = v.min(w - v) as f64 / w as f64;
        fu * fu + fv * fv
    };
    let mut order: Vec<usize> = (0..h * w).collect();
    order.sort_by(|&a, &b| radius(a).total_cmp(&radius(b)).then(a.cmp(&b)));
    let plane = h * w;
    let mut sums = [0.0; WHITENESS_BANDS];
    let mut counts = vec![0usize; WHITENESS_BANDS];
    for (rank, &bin) in order.iter().enumerate() {
        let band = rank * WHITENESS_BANDS / plane;
        for c in 0..s.channels {
            sums[band] += spectrum.data()[c * plane + bin].norm_sqr().as_f64();
            counts[band] += 1;
        }
    }
    let band_means = sums
        .iter()
        .zip(&counts)
        .map(|(&t, &n)| if n == 0 { 0.0 } else { t / n as f64 })
        .collect();
    let mean = x.data().iter().map(|v| v.as_f64()).sum::<f64>() / x.len() as f64;
    let variance = x
        .data()
        .iter()
        .map(|v| (v.as_f64() - mean).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    Ok(WhitenessReport {
        band_means,
        mean,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{gaussian_field, SeedRng, Shape};

    #[test]
    fn psnr_examples() {
        let shape = Shape::new(1, 4, 4);
        let a: Field = gaussian_field(&mut SeedRng::new(1), shape).unwrap();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let z = Field::zeros(shape).unwrap();
        let one = Field::filled(shape, 1.0).unwrap();
        assert_eq!(psnr(&z, &one, 1.0).unwrap(), 0.0);
        let tenth = Field::filled(shape, 0.1).unwrap();
        assert!((psnr(&z, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert!(psnr(&z, &tenth, 0.0).is_err());
    }

    #[test]
    fn ssim_examples() {
        let shape = Shape::new(1, 16, 16);
        let cfg = SsimConfig::default();
        let a: Field = gaussian_field(&mut SeedRng::new(2), shape).unwrap();
        assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let (m1, m2) = (0.3, 0.7);
        let expected = (2.0 * m1 * m2 + cfg.c1()) / (m1 * m1 + m2 * m2 + cfg.c1());
        let p = Field::filled(shape, m1).unwrap();
        let q = Field::filled(shape, m2).unwrap();
        assert!((ssim(&p, &q, &cfg).unwrap() - expected).abs() < 1e-12);
        assert!((ssim(&p, &p, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a, &cfg.with_window(17)).is_err());
        assert!(ssim(&a, &a, &cfg.with_window(4)).is_err());
    }

    #[test]
    fn window_fits_matches_direct_check() {
        let m = MaskField::from_fn(7, 9, |y, x| (y * 3 + x * 5) % 7 != 0 || y > 4).unwrap();
        let n = 3;
        let fits = window_fits(&m, n);
        let mut i = 0;
        for y in 0..=7 - n {
            for x in 0..=9 - n {
                let direct = (0..n).all(|dy| (0..n).all(|dx| m.get(y + dy, x + dx)));
                assert_eq!(fits[i], direct);
                i += 1;
            }
        }
    }

    #[test]
    fn masked_examples() {
        let shape = Shape::new(1, 12, 12);
        let a: Field = gaussian_field(&mut SeedRng::new(3), shape).unwrap();
        let b: Field = gaussian_field(&mut SeedRng::new(4), shape).unwrap();
        let ones = MaskField::ones(12, 12).unwrap();
        let cfg = SsimConfig::default();
        assert_eq!(
            masked_metric(Metric::Ssim(cfg), &a, &b, &ones, Region::Observed).unwrap(),
            ssim(&a, &b, &cfg).unwrap()
        );
        assert_eq!(
            masked_metric(Metric::Psnr { peak: 1.0 }, &a, &b, &ones, Region::Observed).unwrap(),
            psnr(&a, &b, 1.0).unwrap()
        );
        let half = MaskField::from_fn(12, 12, |y, _| y < 6).unwrap();
        assert_eq!(
            masked_metric(
                Metric::Psnr { peak: 1.0 },
                &a,
                &a,
                &half,
                Region::Unobserved
            )
            .unwrap(),
            PSNR_CAP
        );
        assert!(matches!(
            masked_metric(
                Metric::Psnr { peak: 1.0 },
                &a,
                &b,
                &ones,
                Region::Unobserved
            ),
            Err(SonicError::EmptyRegion)
        ));
        // Region smaller than the window.
        assert!(matches!(
            masked_metric(Metric::Ssim(cfg), &a, &b, &half, Region::Unobserved),
            Err(SonicError::EmptyRegion)
        ));
    }

    #[test]
    fn whiteness_examples() {
        let x: Field = gaussian_field(&mut SeedRng::new(5), Shape::new(1, 64, 64)).unwrap();
        let r = whiteness_report(&x).unwrap();
        assert_eq!(r.band_means.len(), WHITENESS_BANDS);
        assert!(r.bands_within(0.7, 1.3), "{:?}", r.band_means);
        assert_eq!(whiteness_report(&x).unwrap(), r);

        let c = Field::filled(Shape::new(1, 8, 8), 2.0).unwrap();
        let r = whiteness_report(&c).unwrap();
        assert!(r.band_means[0] > 0.0);
        assert!(r.band_means[1..].iter().all(|&m| m < 1e-20));
        assert_eq!(r.variance, 0.0);
    }
}
