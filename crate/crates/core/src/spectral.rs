//! Unitary 2-D discrete Fourier transforms over [`Field`] channels.
//!
//! Transforms are normalized by `1/sqrt(H*W)` in both directions, so the
//! inverse transform is the adjoint of the forward one and Parseval holds
//! without scale factors. Spectra are kept in full (not half-packed) form
//! and are Hermitian whenever they describe a real field.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SonicError};
use crate::fields::{Field, Shape};
use crate::scalar::Scalar;

/// Relative tolerance used by [`idft2`] when deciding whether an input
/// spectrum is Hermitian.
pub const HERMITIAN_TOLERANCE: f64 = 1e-9;

/// Complex `C×H×W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T = f64> {
    shape: Shape,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn zeros(shape: Shape) -> Result<Self> {
        shape.validate()?;
        Ok(Spectrum {
            shape,
            data: vec![Complex::new(T::zero(), T::zero()); shape.len()],
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<Complex<T>>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(SonicError::LengthMismatch {
                shape,
                got: data.len(),
            });
        }
        Ok(Spectrum { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> Complex<T> {
        self.data[self.shape.index(c, u, v)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, u: usize, v: usize, value: Complex<T>) {
        let i = self.shape.index(c, u, v);
        self.data[i] = value;
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Real inner product `Σ re·re' + im·im'`, the one under which
    /// real and imaginary parts act as independent real parameters.
    pub fn real_dot(&self, other: &Spectrum<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(SonicError::ShapeMismatch {
                what: "spectrum dot",
                expected: self.shape,
                got: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum())
    }

    /// Largest `|S[u,v] - conj(S[-u,-v])|`.
    pub fn hermitian_deviation(&self) -> T {
        let Shape {
            channels,
            height,
            width,
        } = self.shape;
        let mut worst = T::zero();
        for c in 0..channels {
            for u in 0..height {
                for v in 0..width {
                    let a = self.get(c, u, v);
                    let b = self.get(c, (height - u) % height, (width - v) % width);
                    worst = worst.max((a - b.conj()).norm());
                }
            }
        }
        worst
    }

    /// Flattens to interleaved `(re, im)` pairs.
    pub fn to_interleaved(&self) -> Vec<T> {
        self.data.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn from_interleaved(shape: Shape, values: &[T]) -> Result<Self> {
        if values.len() != 2 * shape.len() {
            return Err(SonicError::LengthMismatch {
                shape,
                got: values.len() / 2,
            });
        }
        let data = values
            .chunks_exact(2)
            .map(|p| Complex::new(p[0], p[1]))
            .collect();
        Self::from_vec(shape, data)
    }
}

/// Cached row/column FFT plans for one grid size.
pub struct Fft2<T: Scalar> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Fft2<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    fn check(&self, shape: Shape) -> Result<()> {
        if shape.height != self.height || shape.width != self.width {
            return Err(SonicError::ShapeMismatch {
                what: "fft plan",
                expected: Shape::new(shape.channels, self.height, self.width),
                got: shape,
            });
        }
        Ok(())
    }

    fn transform_plane(&self, plane: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        row.process(plane);
        let mut column = vec![Complex::new(T::zero(), T::zero()); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = plane[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                plane[y * w + x] = column[y];
            }
        }
        let norm = T::lit(1.0 / ((h * w) as f64).sqrt());
        for z in plane.iter_mut() {
            *z *= norm;
        }
    }

    pub fn forward(&self, x: &Field<T>) -> Result<Spectrum<T>> {
        self.check(x.shape())?;
        if !x.is_finite() {
            return Err(SonicError::NonFinite("dft2 input".into()));
        }
        let shape = x.shape();
        let mut data: Vec<Complex<T>> = x
            .data()
            .iter()
            .map(|&v| Complex::new(v, T::zero()))
            .collect();
        for plane in data.chunks_exact_mut(shape.plane()) {
            self.transform_plane(plane, false);
        }
        Ok(hermitian_project(&Spectrum { shape, data }))
    }

    pub fn inverse(&self, s: &Spectrum<T>) -> Result<Field<T>> {
        self.check(s.shape())?;
        let scale = s
            .data
            .iter()
            .fold(T::one(), |m, z| m.max(z.re.abs()).max(z.im.abs()));
        let dev = s.hermitian_deviation();
        if dev > T::lit(HERMITIAN_TOLERANCE) * scale || !dev.is_finite() {
            return Err(SonicError::NonHermitian(dev.as_f64()));
        }
        let shape = s.shape();
        let mut data = hermitian_project(s).data;
        for plane in data.chunks_exact_mut(shape.plane()) {
            self.transform_plane(plane, true);
        }
        Ok(Field::from_raw(
            shape,
            data.into_iter().map(|z| z.re).collect(),
        ))
    }
}

/// Per-channel unitary 2-D DFT of a real field. The result is exactly
/// Hermitian.
pub fn dft2<T: Scalar>(x: &Field<T>) -> Result<Spectrum<T>> {
    Fft2::new(x.shape().height, x.shape().width).forward(x)
}

/// Inverse of [`dft2`]. Inputs further than [`HERMITIAN_TOLERANCE`] (relative
/// to the largest component, floored at 1) from Hermitian are rejected;
/// accepted inputs are projected before transforming.
pub fn idft2<T: Scalar>(s: &Spectrum<T>) -> Result<Field<T>> {
    Fft2::new(s.shape().height, s.shape().width).inverse(s)
}

/// Maps a gradient with respect to a real field `x` to the gradient with
/// respect to its spectrum `X`, where `x = idft2(X)` and the real and
/// imaginary parts of each bin are independent real parameters.
pub fn adjoint_to_spectrum<T: Scalar>(g_spatial: &Field<T>) -> Result<Spectrum<T>> {
    dft2(g_spatial)
}

/// `(S + conj-flip(S)) / 2`: nearest Hermitian spectrum. Self-conjugate bins
/// (DC and Nyquist) come out purely real.
pub fn hermitian_project<T: Scalar>(s: &Spectrum<T>) -> Spectrum<T> {
    let Shape {
        channels,
        height,
        width,
    } = s.shape;
    let half = T::lit(0.5);
    let mut out = s.clone();
    for c in 0..channels {
        for u in 0..height {
            for v in 0..width {
                let a = s.get(c, u, v);
                let b = s.get(c, (height - u) % height, (width - v) % width);
                // Written so that the mirrored bin evaluates to the exact
                // conjugate of this one.
                let z = Complex::new((a.re + b.re) * half, (a.im - b.im) * half);
                out.set(c, u, v, z);
            }
        }
    }
    out
}
