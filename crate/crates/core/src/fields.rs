//! Grid containers, the pinned random number generator, and the binary
//! observation mask.
//!
//! Every grid is stored row-major in `(channel, row, column)` order.

use std::fmt;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::scalar::Scalar;

/// Identifier recorded in run metadata for the random stream in use.
pub const RNG_ALGORITHM: &str = "chacha8-boxmuller-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(SonicError::InvalidShape(*self));
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Real-valued `C×H×W` grid. Images, latents, velocities, gradients and
/// seeds all live in this type.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Field<T> {
    pub fn zeros(shape: Shape) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        shape.validate()?;
        Ok(Field {
            shape,
            data: vec![value; shape.len()],
        })
    }

    /// Builds a field from raw data, rejecting wrong lengths and non-finite
    /// entries.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(SonicError::LengthMismatch {
                shape,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(SonicError::NonFinite(format!("field entry {i}")));
        }
        Ok(Field { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_vec(shape, data)
    }

    /// Same-shape field whose entries are produced without a finiteness
    /// check. Used on hot paths that verify finiteness separately.
    pub(crate) fn from_raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Field { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Field<T>, what: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(SonicError::ShapeMismatch {
                what,
                expected: self.shape,
                got: other.shape,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Field<T> {
        Field::from_raw(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Field<T>, f: impl Fn(T, T) -> T) -> Result<Field<T>> {
        self.ensure_same_shape(other, "zip_map")?;
        Ok(Field::from_raw(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Field<T>) -> Result<Field<T>> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field<T>) -> Result<Field<T>> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: T) -> Field<T> {
        self.map(|v| v * k)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: T, other: &Field<T>) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Field<T>) -> Result<T> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn norm_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Field<T>) -> Result<T> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    pub fn cast<U: Scalar>(&self) -> Field<U> {
        Field::from_raw(
            self.shape,
            self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        )
    }
}

/// Binary observation operator over an `H×W` grid; `true` marks an observed
/// pixel. Broadcast across channels when applied to a field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskField {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl MaskField {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        Shape::new(1, height, width).validate()?;
        if bits.len() != height * width {
            return Err(SonicError::LengthMismatch {
                shape: Shape::new(1, height, width),
                got: bits.len(),
            });
        }
        Ok(MaskField {
            height,
            width,
            bits,
        })
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, bits)
    }

    /// Builds a mask from a single-channel field of 0.0/1.0 entries.
    pub fn from_field<T: Scalar>(field: &Field<T>) -> Result<Self> {
        let s = field.shape();
        if s.channels != 1 {
            return Err(SonicError::Format(format!(
                "mask tensor must have one channel, got {s}"
            )));
        }
        let mut bits = Vec::with_capacity(s.plane());
        for &v in field.data() {
            if v == T::one() {
                bits.push(true);
            } else if v == T::zero() {
                bits.push(false);
            } else {
                return Err(SonicError::Format(format!("mask entry {v} is not 0 or 1")));
            }
        }
        Self::new(s.height, s.width, bits)
    }

    pub fn to_field<T: Scalar>(&self, channels: usize) -> Field<T> {
        let plane: Vec<T> = self
            .bits
            .iter()
            .map(|&b| if b { T::one() } else { T::zero() })
            .collect();
        let mut data = Vec::with_capacity(plane.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
        Field::from_raw(Shape::new(channels, self.height, self.width), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn observed_at(&self, pixel: usize) -> bool {
        self.bits[pixel]
    }

    pub fn observed_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn unobserved_count(&self) -> usize {
        self.bits.len() - self.observed_count()
    }

    pub fn inverted(&self) -> MaskField {
        MaskField {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn ensure_matches(&self, shape: Shape) -> Result<()> {
        if self.height != shape.height || self.width != shape.width {
            return Err(SonicError::ShapeMismatch {
                what: "mask",
                expected: Shape::new(shape.channels, self.height, self.width),
                got: shape,
            });
        }
        Ok(())
    }
}

/// `A ⊙ x`, with the mask broadcast over channels. Unobserved entries become
/// `+0.0`.
pub fn apply_mask<T: Scalar>(x: &Field<T>, mask: &MaskField) -> Result<Field<T>> {
    mask.ensure_matches(x.shape())?;
    let plane = x.shape().plane();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if mask.observed_at(i % plane) {
                v
            } else {
                T::zero()
            }
        })
        .collect();
    Ok(Field::from_raw(x.shape(), data))
}

/// Seeded random stream: ChaCha8 keyed by a 64-bit seed, uniform doubles
/// from the top 53 bits, normals by the Box–Muller transform (both outputs
/// of each pair are used, cosine branch first).
#[derive(Clone, Debug)]
pub struct SeedRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed and a label.
    pub fn fork(&self, stream: u64) -> SeedRng {
        SeedRng::new(
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
                ^ 0x5851_F42D_4C95_7F2D,
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`.
    pub fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.spare.take() {
            return v;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn shuffle<U>(&mut self, items: &mut [U]) {
        for i in (1..items.len()).rev() {
            let j = self.int_inclusive(0, i);
            items.swap(i, j);
        }
    }
}

/// Field of i.i.d. standard normal entries.
pub fn gaussian_field<T: Scalar>(rng: &mut SeedRng, shape: Shape) -> Result<Field<T>> {
    shape.validate()?;
    let data = (0..shape.len()).map(|_| T::lit(rng.normal())).collect();
    Ok(Field::from_raw(shape, data))
}
