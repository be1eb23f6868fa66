//! Small convolutional velocity network with hand-derived backward pass.
//!
//! ```text
//! phi   = sinusoidal features of s
//! z1    = conv3x3(x)  + b1 + T1 phi + E1[class]      a1 = act(z1)
//! z2    = conv3x3(a1) + b2 + T2 phi + E2[class]      a2 = act(z2)
//! gain  = Tg phi + bg                                (one per channel)
//! v     = conv3x3(a2) + b3 + T3 phi + E3[class] + gain * x
//! ```
//!
//! Convolutions use zero padding and keep the spatial size. The per-channel
//! `gain * x` term is the pointwise path; the convolution stack is the
//! neighborhood path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::fields::{Field, SeedRng, Shape};
use crate::io;
use crate::scalar::Scalar;

use super::{ClassId, VelocityModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => z / (T::one() + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Silu => {
                let sig = T::one() / (T::one() + (-z).exp());
                sig * (T::one() + z * (T::one() - sig))
            }
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: usize,
    pub hidden: [usize; 2],
    pub time_features: usize,
    /// Conditional classes, excluding the reserved null class.
    pub num_classes: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(channels: usize, hidden: usize, num_classes: usize) -> Self {
        Architecture {
            channels,
            hidden: [hidden, hidden],
            time_features: 8,
            num_classes,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden[0] == 0 || self.hidden[1] == 0 {
            return Err(SonicError::config(
                "architecture",
                "layer widths must be positive",
            ));
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return Err(SonicError::config(
                "time_features",
                "must be a positive even number",
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Offsets of each parameter block in the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    t1: usize,
    t2: usize,
    t3: usize,
    tg: usize,
    bg: usize,
    e1: usize,
    e2: usize,
    e3: usize,
    total: usize,
}

impl Layout {
    fn new(a: &Architecture) -> Self {
        let (c, h1, h2, k) = (a.channels, a.hidden[0], a.hidden[1], a.time_features);
        let rows = a.num_classes + 1;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let w1 = take(h1 * c * 9);
        let b1 = take(h1);
        let w2 = take(h2 * h1 * 9);
        let b2 = take(h2);
        let w3 = take(c * h2 * 9);
        let b3 = take(c);
        let t1 = take(h1 * k);
        let t2 = take(h2 * k);
        let t3 = take(c * k);
        let tg = take(c * k);
        let bg = take(c);
        let e1 = take(rows * h1);
        let e2 = take(rows * h2);
        let e3 = take(rows * c);
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            t1,
            t2,
            t3,
            tg,
            bg,
            e1,
            e2,
            e3,
            total: at,
        }
    }
}

/// Sinusoidal time features `sin(w_j s), cos(w_j s)` with `w_j = pi 2^j / 2`.
pub(crate) fn time_features<T: Scalar>(s: T, count: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(count);
    for j in 0..count / 2 {
        let w = T::lit(std::f64::consts::PI * (1u64 << j) as f64 / 2.0);
        out.push((w * s).sin());
        out.push((w * s).cos());
    }
    out
}

// --- convolution kernels -------------------------------------------------

#[inline]
fn tap_ranges(
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
) -> (isize, isize, usize, usize, usize, usize) {
    let dy = ky as isize - 1;
    let dx = kx as isize - 1;
    let ylo = if dy < 0 { 1 } else { 0 };
    let yhi = if dy > 0 { h - 1 } else { h };
    let xlo = if dx < 0 { 1 } else { 0 };
    let xhi = if dx > 0 { w - 1 } else { w };
    (dy, dx, ylo, yhi.max(ylo), xlo, xhi.max(xlo))
}

/// `out[o] += sum_i conv(input[i], weight[o, i])`.
fn conv3x3_acc<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    out: &mut [T],
) {
    let hw = h * w;
    for o in 0..cout {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        for i in 0..cin {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    let (dy, dx, ylo, yhi, xlo, xhi) = tap_ranges(h, w, ky, kx);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let src_start = (sy * w) as isize + xlo as isize + dx;
                        let src = &in_i[src_start as usize..src_start as usize + (xhi - xlo)];
                        let dst = &mut out_o[y * w + xlo..y * w + xhi];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`conv3x3_acc`] with respect to its input.
fn conv3x3_back_input<T: Scalar>(
    dout: &[T],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[T],
    cout: usize,
    din: &mut [T],
) {
    let hw = h * w;
    for o in 0..cout {
        let dout_o = &dout[o * hw..(o + 1) * hw];
        for i in 0..cin {
            let din_i = &mut din[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    let (dy, dx, ylo, yhi, xlo, xhi) = tap_ranges(h, w, ky, kx);
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let start = ((sy * w) as isize + xlo as isize + dx) as usize;
                        let dst = &mut din_i[start..start + (xhi - xlo)];
                        let src = &dout_o[y * w + xlo..y * w + xhi];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv3x3_acc`] with respect to its weights, accumulated.
fn conv3x3_back_weight<T: Scalar>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    dout: &[T],
    cout: usize,
    dweight: &mut [T],
) {
    let hw = h * w;
    for o in 0..cout {
        let dout_o = &dout[o * hw..(o + 1) * hw];
        for i in 0..cin {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (dy, dx, ylo, yhi, xlo, xhi) = tap_ranges(h, w, ky, kx);
                    let mut acc = T::zero();
                    for y in ylo..yhi {
                        let sy = (y as isize + dy) as usize;
                        let start = ((sy * w) as isize + xlo as isize + dx) as usize;
                        let src = &in_i[start..start + (xhi - xlo)];
                        let g = &dout_o[y * w + xlo..y * w + xhi];
                        acc += src.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    dweight[((o * cin + i) * 3 + ky) * 3 + kx] += acc;
                }
            }
        }
    }
}

// --- network ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct ConvVelocityNet<T = f64> {
    arch: Architecture,
    layout_total: usize,
    params: Vec<T>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    shape: Shape,
    class: usize,
    phi: Vec<T>,
    gain: Vec<T>,
    z1: Vec<T>,
    a1: Vec<T>,
    z2: Vec<T>,
    a2: Vec<T>,
}

/// Flat gradient with the same layout as the parameter vector.
pub type ParamGrads<T> = Vec<T>;

impl<T: Scalar> ConvVelocityNet<T> {
    /// Random initialization: convolution weights `N(0, 1/fan_in)` (output
    /// layer scaled by 0.1), time projections into the hidden layers
    /// `N(0, 0.25/K)`, class embeddings zero, pointwise gain 1.
    pub fn new(arch: Architecture, rng: &mut SeedRng) -> Result<Self> {
        arch.validate()?;
        let l = Layout::new(&arch);
        let (c, h1, h2, k) = (
            arch.channels,
            arch.hidden[0],
            arch.hidden[1],
            arch.time_features,
        );
        let mut p = vec![T::zero(); l.total];
        let mut fill = |p: &mut [T], std: f64| {
            for v in p.iter_mut() {
                *v = T::lit(std * rng.normal());
            }
        };
        fill(&mut p[l.w1..l.b1], (1.0 / (9 * c) as f64).sqrt());
        fill(&mut p[l.w2..l.b2], (1.0 / (9 * h1) as f64).sqrt());
        fill(&mut p[l.w3..l.b3], 0.1 * (1.0 / (9 * h2) as f64).sqrt());
        fill(&mut p[l.t1..l.t2], 0.5 / (k as f64).sqrt());
        fill(&mut p[l.t2..l.t3], 0.5 / (k as f64).sqrt());
        for v in &mut p[l.bg..l.bg + c] {
            *v = T::one();
        }
        Ok(ConvVelocityNet {
            arch,
            layout_total: l.total,
            params: p,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self> {
        arch.validate()?;
        let total = arch.param_count();
        if params.len() != total {
            return Err(SonicError::Format(format!(
                "architecture needs {total} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(SonicError::NonFinite("network parameters".into()));
        }
        Ok(ConvVelocityNet {
            arch,
            layout_total: total,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.layout_total
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    fn check_input(&self, x: &Field<T>, class: ClassId) -> Result<()> {
        if x.shape().channels != self.arch.channels {
            return Err(SonicError::ShapeMismatch {
                what: "network input channels",
                expected: Shape::new(self.arch.channels, x.shape().height, x.shape().width),
                got: x.shape(),
            });
        }
        if class.index() > self.arch.num_classes {
            return Err(SonicError::UnknownClass {
                id: class.0,
                classes: self.arch.num_classes,
            });
        }
        Ok(())
    }

    /// `W phi + E[class] + b` for one embedding block of width `n`.
    fn embedding(
        &self,
        n: usize,
        t_off: usize,
        e_off: usize,
        b_off: Option<usize>,
        phi: &[T],
        class: usize,
    ) -> Vec<T> {
        let k = phi.len();
        (0..n)
            .map(|j| {
                let row = &self.params[t_off + j * k..t_off + (j + 1) * k];
                let mut v: T = row.iter().zip(phi).map(|(&a, &b)| a * b).sum();
                v += self.params[e_off + class * n + j];
                if let Some(b) = b_off {
                    v += self.params[b + j];
                }
                v
            })
            .collect()
    }

    pub fn forward(
        &self,
        x: &Field<T>,
        s: T,
        class: ClassId,
    ) -> Result<(Field<T>, ForwardCache<T>)> {
        self.check_input(x, class)?;
        let l = self.layout();
        let shape = x.shape();
        let (h, w) = (shape.height, shape.width);
        let hw = h * w;
        let (c, h1, h2) = (self.arch.channels, self.arch.hidden[0], self.arch.hidden[1]);
        let act = self.arch.activation;
        let cls = class.index();
        let phi = time_features(s, self.arch.time_features);

        let bias1 = self.embedding(h1, l.t1, l.e1, Some(l.b1), &phi, cls);
        let mut z1: Vec<T> = bias1
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, hw))
            .collect();
        conv3x3_acc(x.data(), c, h, w, &self.params[l.w1..l.b1], h1, &mut z1);
        let a1: Vec<T> = z1.iter().map(|&z| act.apply(z)).collect();

        let bias2 = self.embedding(h2, l.t2, l.e2, Some(l.b2), &phi, cls);
        let mut z2: Vec<T> = bias2
            .iter()
            .flat_map(|&b| std::iter::repeat_n(b, hw))
            .collect();
        conv3x3_acc(&a1, h1, h, w, &self.params[l.w2..l.b2], h2, &mut z2);
        let a2: Vec<T> = z2.iter().map(|&z| act.apply(z)).collect();

        let bias3 = self.embedding(c, l.t3, l.e3, Some(l.b3), &phi, cls);
        let gain: Vec<T> = (0..c)
            .map(|j| {
                let row = &self.params[l.tg + j * phi.len()..l.tg + (j + 1) * phi.len()];
                row.iter().zip(&phi).map(|(&a, &b)| a * b).sum::<T>() + self.params[l.bg + j]
            })
            .collect();
        let mut out: Vec<T> = (0..c)
            .flat_map(|j| {
                let g = gain[j];
                let b = bias3[j];
                x.channel(j).iter().map(move |&v| b + g * v)
            })
            .collect();
        conv3x3_acc(&a2, h2, h, w, &self.params[l.w3..l.b3], c, &mut out);

        let cache = ForwardCache {
            shape,
            class: cls,
            phi,
            gain,
            z1,
            a1,
            z2,
            a2,
        };
        Ok((Field::from_raw(shape, out), cache))
    }

    /// Backpropagates `cotangent` (gradient of a scalar with respect to the
    /// network output). Returns the input gradient and, when `param_grads`
    /// is given, accumulates parameter gradients into it.
    pub fn backward(
        &self,
        x: &Field<T>,
        cache: &ForwardCache<T>,
        cotangent: &Field<T>,
        mut param_grads: Option<&mut [T]>,
    ) -> Result<Field<T>> {
        x.ensure_same_shape(cotangent, "network backward")?;
        if cache.shape != x.shape() {
            return Err(SonicError::ShapeMismatch {
                what: "forward cache",
                expected: cache.shape,
                got: x.shape(),
            });
        }
        if let Some(g) = param_grads.as_deref() {
            if g.len() != self.layout_total {
                return Err(SonicError::Format(
                    "parameter gradient buffer has wrong length".into(),
                ));
            }
        }
        let l = self.layout();
        let shape = x.shape();
        let (h, w) = (shape.height, shape.width);
        let hw = h * w;
        let (c, h1, h2) = (self.arch.channels, self.arch.hidden[0], self.arch.hidden[1]);
        let k = cache.phi.len();
        let act = self.arch.activation;
        let lam = cotangent.data();

        // output layer
        let mut dx: Vec<T> = (0..c)
            .flat_map(|j| {
                let g = cache.gain[j];
                lam[j * hw..(j + 1) * hw].iter().map(move |&v| g * v)
            })
            .collect();
        let mut da2 = vec![T::zero(); h2 * hw];
        conv3x3_back_input(lam, h2, h, w, &self.params[l.w3..l.b3], c, &mut da2);
        if let Some(g) = param_grads.as_deref_mut() {
            conv3x3_back_weight(&cache.a2, h2, h, w, lam, c, &mut g[l.w3..l.b3]);
            for j in 0..c {
                let plane = &lam[j * hw..(j + 1) * hw];
                let db: T = plane.iter().copied().sum();
                let dgain: T = plane.iter().zip(x.channel(j)).map(|(&a, &b)| a * b).sum();
                g[l.b3 + j] += db;
                g[l.e3 + cache.class * c + j] += db;
                g[l.bg + j] += dgain;
                for (q, &p) in cache.phi.iter().enumerate() {
                    g[l.t3 + j * k + q] += db * p;
                    g[l.tg + j * k + q] += dgain * p;
                }
            }
        }

        // second hidden layer
        let dz2: Vec<T> = da2
            .iter()
            .zip(&cache.z2)
            .map(|(&g, &z)| g * act.derivative(z))
            .collect();
        let mut da1 = vec![T::zero(); h1 * hw];
        conv3x3_back_input(&dz2, h1, h, w, &self.params[l.w2..l.b2], h2, &mut da1);
        if let Some(g) = param_grads.as_deref_mut() {
            conv3x3_back_weight(&cache.a1, h1, h, w, &dz2, h2, &mut g[l.w2..l.b2]);
            accumulate_embedding_grads(g, &dz2, hw, h2, &cache.phi, cache.class, l.b2, l.t2, l.e2);
        }

        // first hidden layer
        let dz1: Vec<T> = da1
            .iter()
            .zip(&cache.z1)
            .map(|(&g, &z)| g * act.derivative(z))
            .collect();
        conv3x3_back_input(&dz1, c, h, w, &self.params[l.w1..l.b1], h1, &mut dx);
        if let Some(g) = param_grads {
            conv3x3_back_weight(x.data(), c, h, w, &dz1, h1, &mut g[l.w1..l.b1]);
            accumulate_embedding_grads(g, &dz1, hw, h1, &cache.phi, cache.class, l.b1, l.t1, l.e1);
        }
        Ok(Field::from_raw(shape, dx))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params_path = params_path_for(path);
        let checkpoint = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            architecture: self.arch.clone(),
            param_count: self.layout_total,
            params_file: params_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        let params = Field::from_raw(Shape::new(1, 1, self.layout_total), self.params.clone());
        io::write_field(&params_path, &params)?;
        io::write_atomic(path, serde_json::to_string_pretty(&checkpoint)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let checkpoint: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(SonicError::Format(format!(
                "unsupported checkpoint format `{}`",
                checkpoint.format
            )));
        }
        let params_path = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&checkpoint.params_file);
        let params: Field<T> = io::read_field(&params_path)?;
        if params.len() != checkpoint.param_count {
            return Err(SonicError::Format("parameter block length mismatch".into()));
        }
        Self::from_params(checkpoint.architecture, params.into_vec())
    }

    /// Copy with parameters rounded through `f32`, i.e. exactly what
    /// [`ConvVelocityNet::load`] returns after [`ConvVelocityNet::save`].
    pub fn rounded_to_f32(&self) -> Self {
        ConvVelocityNet {
            arch: self.arch.clone(),
            layout_total: self.layout_total,
            params: self
                .params
                .iter()
                .map(|&v| T::lit(v.as_f64() as f32 as f64))
                .collect(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn accumulate_embedding_grads<T: Scalar>(
    g: &mut [T],
    dz: &[T],
    hw: usize,
    n: usize,
    phi: &[T],
    class: usize,
    b_off: usize,
    t_off: usize,
    e_off: usize,
) {
    let k = phi.len();
    for j in 0..n {
        let db: T = dz[j * hw..(j + 1) * hw].iter().copied().sum();
        g[b_off + j] += db;
        g[e_off + class * n + j] += db;
        for (q, &p) in phi.iter().enumerate() {
            g[t_off + j * k + q] += db * p;
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "sonic-checkpoint-v1";

/// JSON descriptor written next to an `SNF1` parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub architecture: Architecture,
    pub param_count: usize,
    pub params_file: String,
}

fn params_path_for(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    path.with_file_name(format!("{stem}.params.snf"))
}

impl<T: Scalar> VelocityModel<T> for ConvVelocityNet<T> {
    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn eval(&self, x: &Field<T>, s: T, class: ClassId) -> Result<Field<T>> {
        Ok(self.forward(x, s, class)?.0)
    }

    fn vjp_input(
        &self,
        x: &Field<T>,
        s: T,
        class: ClassId,
        cotangent: &Field<T>,
    ) -> Result<Field<T>> {
        let (_, cache) = self.forward(x, s, class)?;
        self.backward(x, &cache, cotangent, None)
    }
}
