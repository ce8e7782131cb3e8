//! Real-valued building blocks around the state space core: biased
//! convolutions, gelu, per-pixel layer norm, the activation blocks and
//! losses, each with a hand-written backward pass.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::tensor::{conv2d_backward, conv2d_cols, conv_cols, spatial_dims, ConvKernel, Tensor};

/// Named flat views over every trainable tensor.
pub trait Params<T: Real> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>);

    fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.params("", &mut v);
        v.iter().map(|(_, s)| s.len()).sum()
    }

    fn flat(&self) -> Vec<T> {
        let mut v = Vec::new();
        self.params("", &mut v);
        v.into_iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    fn set_flat(&mut self, values: &[T]) {
        let mut v = Vec::new();
        self.params_mut("", &mut v);
        let mut off = 0;
        for (_, s) in v {
            s.copy_from_slice(&values[off..off + s.len()]);
            off += s.len();
        }
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    /// `(name, offset, len)` for each tensor in [`Params::flat`] order.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut v = Vec::new();
        self.params("", &mut v);
        let mut off = 0;
        v.into_iter()
            .map(|(n, s)| {
                let e = (n, off, s.len());
                off += s.len();
                e
            })
            .collect()
    }
}

pub(crate) fn uniform<T: Real>(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect()
}

/// Real convolution with per-output bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub kernel: ConvKernel<T>,
    pub bias: Vec<T>,
}

pub struct ConvCache<T> {
    cols: Tensor<T>,
}

impl<T: Real> Conv<T> {
    /// Fan-in uniform weights scaled by `gain`, zero bias.
    pub fn init(f_out: usize, f_in: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Result<Self> {
        let bound = gain / ((f_in * k * k) as f64).sqrt();
        Ok(Self {
            kernel: ConvKernel::from_vec(f_out, f_in, k, uniform(rng, f_out * f_in * k * k, bound))?,
            bias: vec![T::zero(); f_out],
        })
    }

    pub fn zeros(f_out: usize, f_in: usize, k: usize) -> Result<Self> {
        Ok(Self {
            kernel: ConvKernel::zeros(f_out, f_in, k)?,
            bias: vec![T::zero(); f_out],
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        let (_, _, _, f) = spatial_dims(x.shape())?;
        if f != self.kernel.f_in() {
            return Err(crate::error::shape_err("conv", self.kernel.tensor().shape(), x.shape()));
        }
        let cols = conv_cols(x, self.kernel.width())?;
        let mut y = conv2d_cols(&self.kernel, &cols)?;
        add_bias(&mut y, &self.bias);
        Ok((y, ConvCache { cols }))
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Accumulates parameter gradients into `grad`; returns dL/dx.
    pub fn backward(&self, cache: &ConvCache<T>, dy: &Tensor<T>, grad: &mut Self, need_input: bool) -> Result<Option<Tensor<T>>> {
        let (dx, dk) = conv2d_backward(&self.kernel, &cache.cols, dy, need_input)?;
        for (g, d) in grad.kernel.data_mut().iter_mut().zip(dk.data()) {
            *g += *d;
        }
        let f = self.bias.len();
        for px in dy.data().chunks_exact(f) {
            for (g, &d) in grad.bias.iter_mut().zip(px) {
                *g += d;
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Params<T> for Conv<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{prefix}kernel"), self.kernel.data()));
        out.push((format!("{prefix}bias"), &self.bias));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((format!("{prefix}kernel"), self.kernel.data_mut()));
        out.push((format!("{prefix}bias"), &mut self.bias));
    }
}

pub(crate) fn add_bias<T: Real>(y: &mut Tensor<T>, bias: &[T]) {
    for px in y.data_mut().chunks_exact_mut(bias.len()) {
        for (v, &b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044715;

/// tanh-approximated gelu
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Per-pixel normalization over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub scale: Vec<T>,
    pub shift: Vec<T>,
}

pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(features: usize) -> Self {
        Self {
            scale: vec![T::one(); features],
            shift: vec![T::zero(); features],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let f = self.scale.len();
        let n = x.len() / f;
        let eps = T::of(NORM_EPS);
        let inv_f = T::one() / T::of(f as f64);
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(x.len());
        for px in x.data().chunks_exact(f) {
            let mean = px.iter().copied().sum::<T>() * inv_f;
            let var = px.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_f;
            let s = T::one() / (var + eps).sqrt();
            inv_std.push(s);
            for (c, &v) in px.iter().enumerate() {
                let h = (v - mean) * s;
                xhat.push(h);
                out.push(h * self.scale[c] + self.shift[c]);
            }
        }
        (
            Tensor::new(x.shape().to_vec(), out).expect("same size"),
            NormCache { xhat, inv_std },
        )
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Tensor<T> {
        let f = self.scale.len();
        let inv_f = T::one() / T::of(f as f64);
        let mut dx = Vec::with_capacity(dy.len());
        let mut dxhat = vec![T::zero(); f];
        for ((g, xh), &s) in dy
            .data()
            .chunks_exact(f)
            .zip(cache.xhat.chunks_exact(f))
            .zip(&cache.inv_std)
        {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for c in 0..f {
                grad.scale[c] += g[c] * xh[c];
                grad.shift[c] += g[c];
                dxhat[c] = g[c] * self.scale[c];
                m1 += dxhat[c];
                m2 += dxhat[c] * xh[c];
            }
            m1 *= inv_f;
            m2 *= inv_f;
            for c in 0..f {
                dx.push(s * (dxhat[c] - m1 - xh[c] * m2));
            }
        }
        Tensor::new(dy.shape().to_vec(), dx).expect("same size")
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{prefix}scale"), &self.scale));
        out.push((format!("{prefix}shift"), &self.shift));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((format!("{prefix}scale"), &mut self.scale));
        out.push((format!("{prefix}shift"), &mut self.shift));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    ResNet,
    Glu,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::ResNet => "resnet",
            ActivationKind::Glu => "glu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(ActivationKind::ResNet),
            "glu" => Ok(ActivationKind::Glu),
            other => Err(invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// Pointwise nonlinearity applied to every timestep of a layer's output.
#[derive(Clone, Debug, PartialEq)]
pub enum ActivationBlock<T> {
    /// `x + conv2(gelu(conv1(x)))`, both 3×3.
    ResNet { conv1: Conv<T>, conv2: Conv<T> },
    /// `lin(x) ⊙ σ(gate(x))`, both 1×1.
    Glu { lin: Conv<T>, gate: Conv<T> },
}

pub enum ActCache<T> {
    ResNet {
        c1: ConvCache<T>,
        z1: Tensor<T>,
        c2: ConvCache<T>,
    },
    Glu {
        cl: ConvCache<T>,
        lin: Tensor<T>,
        cg: ConvCache<T>,
        gate: Tensor<T>,
    },
}

impl<T: Real> ActivationBlock<T> {
    pub fn init(kind: ActivationKind, u: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(match kind {
            ActivationKind::ResNet => ActivationBlock::ResNet {
                conv1: Conv::init(u, u, 3, 1.0, rng)?,
                conv2: Conv::init(u, u, 3, 0.1, rng)?,
            },
            ActivationKind::Glu => ActivationBlock::Glu {
                lin: Conv::init(u, u, 1, 1.0, rng)?,
                gate: Conv::init(u, u, 1, 1.0, rng)?,
            },
        })
    }

    pub fn zeros(kind: ActivationKind, u: usize) -> Result<Self> {
        Ok(match kind {
            ActivationKind::ResNet => ActivationBlock::ResNet {
                conv1: Conv::zeros(u, u, 3)?,
                conv2: Conv::zeros(u, u, 3)?,
            },
            ActivationKind::Glu => ActivationBlock::Glu {
                lin: Conv::zeros(u, u, 1)?,
                gate: Conv::zeros(u, u, 1)?,
            },
        })
    }

    pub fn kind(&self) -> ActivationKind {
        match self {
            ActivationBlock::ResNet { .. } => ActivationKind::ResNet,
            ActivationBlock::Glu { .. } => ActivationKind::Glu,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ActCache<T>)> {
        match self {
            ActivationBlock::ResNet { conv1, conv2 } => {
                let (z1, c1) = conv1.forward(x)?;
                let g = z1.map(gelu);
                let (z2, c2) = conv2.forward(&g)?;
                Ok((x.add(&z2)?, ActCache::ResNet { c1, z1, c2 }))
            }
            ActivationBlock::Glu { lin, gate } => {
                let (a, cl) = lin.forward(x)?;
                let (b, cg) = gate.forward(x)?;
                let out = Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(&a, &b)| a * sigmoid(b)).collect(),
                )?;
                Ok((out, ActCache::Glu { cl, lin: a, cg, gate: b }))
            }
        }
    }

    pub fn backward(&self, cache: &ActCache<T>, dy: &Tensor<T>, grad: &mut Self) -> Result<Tensor<T>> {
        match (self, cache, grad) {
            (
                ActivationBlock::ResNet { conv1, conv2 },
                ActCache::ResNet { c1, z1, c2 },
                ActivationBlock::ResNet { conv1: g1, conv2: g2 },
            ) => {
                let dg = conv2.backward(c2, dy, g2, true)?.expect("input grad");
                let dz1 = Tensor::new(
                    dg.shape().to_vec(),
                    dg.data().iter().zip(z1.data()).map(|(&d, &z)| d * gelu_grad(z)).collect(),
                )?;
                let dx = conv1.backward(c1, &dz1, g1, true)?.expect("input grad");
                dx.add(dy)
            }
            (
                ActivationBlock::Glu { lin, gate },
                ActCache::Glu { cl, lin: a, cg, gate: b },
                ActivationBlock::Glu { lin: gl, gate: gg },
            ) => {
                let shape = dy.shape().to_vec();
                let mut da = Vec::with_capacity(dy.len());
                let mut db = Vec::with_capacity(dy.len());
                for ((&d, &a), &b) in dy.data().iter().zip(a.data()).zip(b.data()) {
                    let s = sigmoid(b);
                    da.push(d * s);
                    db.push(d * a * s * (T::one() - s));
                }
                let dx1 = lin.backward(cl, &Tensor::new(shape.clone(), da)?, gl, true)?.expect("input grad");
                let dx2 = gate.backward(cg, &Tensor::new(shape, db)?, gg, true)?.expect("input grad");
                dx1.add(&dx2)
            }
            _ => Err(invalid("activation gradient buffer has the wrong variant")),
        }
    }
}

impl<T: Real> Params<T> for ActivationBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        match self {
            ActivationBlock::ResNet { conv1, conv2 } => {
                conv1.params(&format!("{prefix}conv1."), out);
                conv2.params(&format!("{prefix}conv2."), out);
            }
            ActivationBlock::Glu { lin, gate } => {
                lin.params(&format!("{prefix}lin."), out);
                gate.params(&format!("{prefix}gate."), out);
            }
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        match self {
            ActivationBlock::ResNet { conv1, conv2 } => {
                conv1.params_mut(&format!("{prefix}conv1."), out);
                conv2.params_mut(&format!("{prefix}conv2."), out);
            }
            ActivationBlock::Glu { lin, gate } => {
                lin.params_mut(&format!("{prefix}lin."), out);
                gate.params_mut(&format!("{prefix}gate."), out);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    Mse,
    /// mean of |d| + d² per pixel
    L1L2,
}

impl Loss {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "l1l2" => Ok(Loss::L1L2),
            other => Err(invalid(format!("unknown loss {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::L1L2 => "l1l2",
        }
    }

    /// Loss value and dL/dpred.
    pub fn eval<T: Real>(self, pred: &[T], target: &[T]) -> (f64, Vec<T>) {
        let n = pred.len().max(1) as f64;
        let inv = T::of(1.0 / n);
        let mut total = 0.0;
        let grad = pred
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let d = p - t;
                match self {
                    Loss::Mse => {
                        total += (d * d).as_f64();
                        T::of(2.0) * d * inv
                    }
                    Loss::L1L2 => {
                        total += (d.abs() + d * d).as_f64();
                        (d.signum() * if d == T::zero() { T::zero() } else { T::one() } + T::of(2.0) * d) * inv
                    }
                }
            })
            .collect();
        (total / n, grad)
    }
}
