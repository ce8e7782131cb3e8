//! Deep stacks: encoder → residual sequence layers → decoder, for ConvS5
//! layers and the vanilla ConvRNN baseline.

use std::time::{Duration, Instant};

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{invalid, shape_err, Error, Result};
use crate::layer::{ConvS5Layer, LayerCache, LayerConfig};
use crate::nn::{gelu, gelu_grad, uniform, ActCache, ActivationBlock, ActivationKind, Conv, ConvCache, LayerNorm, Loss, NormCache, Params};
use crate::scalar::{complex_as_real, Real};
use crate::scan::ScanOptions;
use crate::ssm_init::DiagDynamics;
use crate::tensor::{conv2d_backward, conv2d_cols, conv_cols, ConvKernel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(invalid(format!("unknown precision {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Stack configuration shared by both model families.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub layers: usize,
    /// Full state size; for the ConvRNN baseline, the hidden channel count.
    pub p: usize,
    pub u: usize,
    pub kb: usize,
    pub kc: usize,
    pub use_d: bool,
    pub activation: ActivationKind,
    pub data_channels: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub precision: Precision,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: 2,
            p: 32,
            u: 16,
            kb: 3,
            kc: 3,
            use_d: false,
            activation: ActivationKind::ResNet,
            data_channels: 1,
            dt_min: crate::ssm_init::DEFAULT_DT_MIN,
            dt_max: crate::ssm_init::DEFAULT_DT_MAX,
            precision: Precision::F32,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.kb % 2 == 0 || self.kc % 2 == 0 {
            return Err(invalid(format!("kernel widths must be odd (kb={}, kc={})", self.kb, self.kc)));
        }
        if self.u == 0 || self.data_channels == 0 || self.p == 0 {
            return Err(invalid("sizes must be positive"));
        }
        Ok(())
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            p: self.p,
            u: self.u,
            kb: self.kb,
            kc: self.kc,
            use_d: self.use_d,
            activation: self.activation,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
        }
    }

    pub fn to_container(&self, c: &mut Container) {
        c.push_scalar("manifest.layers", self.layers as f64);
        c.push_scalar("manifest.p", self.p as f64);
        c.push_scalar("manifest.u", self.u as f64);
        c.push_scalar("manifest.kb", self.kb as f64);
        c.push_scalar("manifest.kc", self.kc as f64);
        c.push_scalar("manifest.kd", if self.use_d { 1.0 } else { 0.0 });
        c.push_scalar(
            "manifest.activation",
            match self.activation {
                ActivationKind::ResNet => 0.0,
                ActivationKind::Glu => 1.0,
            },
        );
        c.push_scalar("manifest.data_channels", self.data_channels as f64);
        c.push_scalar("manifest.dt_min", self.dt_min);
        c.push_scalar("manifest.dt_max", self.dt_max);
        c.push_scalar("manifest.precision", if self.precision == Precision::F64 { 64.0 } else { 32.0 });
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let n = |k: &str| -> Result<usize> { Ok(c.scalar(&format!("manifest.{k}"))? as usize) };
        Ok(Self {
            layers: n("layers")?,
            p: n("p")?,
            u: n("u")?,
            kb: n("kb")?,
            kc: n("kc")?,
            use_d: n("kd")? == 1,
            activation: if n("activation")? == 1 { ActivationKind::Glu } else { ActivationKind::ResNet },
            data_channels: n("data_channels")?,
            dt_min: c.scalar("manifest.dt_min")?,
            dt_max: c.scalar("manifest.dt_max")?,
            precision: if n("precision")? == 64 { Precision::F64 } else { Precision::F32 },
        })
    }
}

/// A residual sequence layer with carried state.
pub trait SeqLayer<T: Real>: Params<T> + Clone + Send + Sync {
    type State: Clone + Send;
    type Cache;

    fn zero_state(&self, batch: usize, h: usize, w: usize) -> Self::State;
    fn forward(
        &self,
        u: &Tensor<T>,
        state: &Self::State,
        opts: &ScanOptions,
        index: usize,
    ) -> Result<(Tensor<T>, Self::State, Self::Cache)>;
    fn backward(
        &self,
        cache: &Self::Cache,
        d_out: &Tensor<T>,
        d_last: Option<&Self::State>,
        grad: &mut Self,
        opts: &ScanOptions,
    ) -> Result<(Tensor<T>, Self::State)>;
    fn zeros_like(&self) -> Self;
    /// Sequential stages needed for one forward pass over `l` steps.
    fn sequential(&self) -> bool;
    /// `(operator invocations, span)` of the pass that produced `cache`.
    fn scan_stats(cache: &Self::Cache, l: usize) -> (usize, usize);
}

impl<T: Real> SeqLayer<T> for ConvS5Layer<T> {
    type State = Tensor<Complex<T>>;
    type Cache = LayerCache<T>;

    fn zero_state(&self, batch: usize, h: usize, w: usize) -> Self::State {
        Tensor::zeros(&[batch, h, w, self.half()])
    }
    fn forward(&self, u: &Tensor<T>, state: &Self::State, opts: &ScanOptions, index: usize) -> Result<(Tensor<T>, Self::State, Self::Cache)> {
        ConvS5Layer::forward(self, u, state, opts, index)
    }
    fn backward(&self, cache: &Self::Cache, d_out: &Tensor<T>, d_last: Option<&Self::State>, grad: &mut Self, opts: &ScanOptions) -> Result<(Tensor<T>, Self::State)> {
        ConvS5Layer::backward(self, cache, d_out, d_last, grad, opts)
    }
    fn zeros_like(&self) -> Self {
        ConvS5Layer::zeros_like(self)
    }
    fn sequential(&self) -> bool {
        false
    }

    fn scan_stats(cache: &Self::Cache, _l: usize) -> (usize, usize) {
        (cache.stats.operator_invocations, cache.stats.span)
    }
}

/// Vanilla convolutional RNN layer `x_k = tanh(A ∗ x_{k−1} + B ∗ u_k)`,
/// read out with `C ∗ x_k`, then the same norm and activation as ConvS5.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvRnnLayer<T> {
    pub a: ConvKernel<T>,
    pub b: ConvKernel<T>,
    pub c: ConvKernel<T>,
    pub norm: LayerNorm<T>,
    pub activation: ActivationBlock<T>,
}

pub struct RnnCache<T> {
    shape: Vec<usize>,
    u_cols: Tensor<T>,
    prev_cols: Vec<Tensor<T>>,
    states: Vec<Tensor<T>>,
    x_cols: Tensor<T>,
    norm: NormCache<T>,
    act: ActCache<T>,
}

impl<T: Real> ConvRnnLayer<T> {
    pub fn init(hidden: usize, u: usize, kb: usize, kc: usize, activation: ActivationKind, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ka = 3;
        Ok(Self {
            // spectral scale kept below one so tanh stays out of saturation at init
            a: ConvKernel::from_vec(hidden, hidden, ka, uniform(&mut rng, hidden * hidden * ka * ka, 0.5 / ((hidden * ka * ka) as f64).sqrt()))?,
            b: ConvKernel::from_vec(hidden, u, kb, uniform(&mut rng, hidden * u * kb * kb, 1.0 / ((u * kb * kb) as f64).sqrt()))?,
            c: ConvKernel::from_vec(u, hidden, kc, uniform(&mut rng, u * hidden * kc * kc, 1.0 / ((hidden * kc * kc) as f64).sqrt()))?,
            norm: LayerNorm::new(u),
            activation: ActivationBlock::init(activation, u, &mut rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.a.f_out()
    }
}

impl<T: Real> Params<T> for ConvRnnLayer<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{prefix}a_kernel"), self.a.data()));
        out.push((format!("{prefix}b_kernel"), self.b.data()));
        out.push((format!("{prefix}c_kernel"), self.c.data()));
        self.norm.params(&format!("{prefix}norm."), out);
        self.activation.params(&format!("{prefix}act."), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((format!("{prefix}a_kernel"), self.a.data_mut()));
        out.push((format!("{prefix}b_kernel"), self.b.data_mut()));
        out.push((format!("{prefix}c_kernel"), self.c.data_mut()));
        self.norm.params_mut(&format!("{prefix}norm."), out);
        self.activation.params_mut(&format!("{prefix}act."), out);
    }
}

impl<T: Real> SeqLayer<T> for ConvRnnLayer<T> {
    type State = Tensor<T>;
    type Cache = RnnCache<T>;

    fn zero_state(&self, batch: usize, h: usize, w: usize) -> Self::State {
        Tensor::zeros(&[batch, h, w, self.hidden()])
    }

    fn forward(&self, u: &Tensor<T>, state: &Self::State, _opts: &ScanOptions, index: usize) -> Result<(Tensor<T>, Self::State, Self::Cache)> {
        let s = u.shape().to_vec();
        if s.len() != 5 || s[4] != self.b.f_in() {
            return Err(shape_err("convrnn input", &s, &[0, 0, 0, 0, self.b.f_in()]));
        }
        let (l, b, h, w, uc) = (s[0], s[1], s[2], s[3], s[4]);
        let hid = self.hidden();
        if state.shape() != [b, h, w, hid] {
            return Err(shape_err("convrnn state", state.shape(), &[b, h, w, hid]));
        }
        let u_cols = conv_cols(&u.clone().reshape(&[l * b, h, w, uc])?, self.b.width())?;
        let bu = conv2d_cols(&self.b, &u_cols)?;
        let step = b * h * w * hid;
        let mut x = state.clone();
        let mut prev_cols = Vec::with_capacity(l);
        let mut states = Vec::with_capacity(l);
        for k in 0..l {
            let cols = conv_cols(&x, self.a.width())?;
            let mut z = conv2d_cols(&self.a, &cols)?;
            for (zv, &bv) in z.data_mut().iter_mut().zip(&bu.data()[k * step..(k + 1) * step]) {
                *zv = (*zv + bv).tanh();
            }
            if !z.all_finite() {
                return Err(Error::NonFinite { layer: index, step: k });
            }
            prev_cols.push(cols);
            states.push(z.clone());
            x = z;
        }
        let all = Tensor::concat0(&states)?;
        let x_cols = conv_cols(&all, self.c.width())?;
        let y = conv2d_cols(&self.c, &x_cols)?;
        let (normed, norm) = self.norm.forward(&y);
        let (out, act) = self.activation.forward(&normed)?;
        let out = out.reshape(&[l, b, h, w, uc])?;
        Ok((out, x, RnnCache { shape: s, u_cols, prev_cols, states, x_cols, norm, act }))
    }

    fn backward(&self, cache: &Self::Cache, d_out: &Tensor<T>, d_last: Option<&Self::State>, grad: &mut Self, _opts: &ScanOptions) -> Result<(Tensor<T>, Self::State)> {
        let s = &cache.shape;
        let (l, b, h, w, uc) = (s[0], s[1], s[2], s[3], s[4]);
        let hid = self.hidden();
        let d_out = d_out.clone().reshape(&[l * b, h, w, uc])?;
        let dn = self.activation.backward(&cache.act, &d_out, &mut grad.activation)?;
        let dy = self.norm.backward(&cache.norm, &dn, &mut grad.norm);
        let (dx_all, gc) = conv2d_backward(&self.c, &cache.x_cols, &dy, true)?;
        accumulate(grad.c.data_mut(), gc.data());
        let dx_all = dx_all.expect("input grad");
        let step = b * h * w * hid;
        let mut carry = match d_last {
            Some(d) => d.clone(),
            None => Tensor::zeros(&[b, h, w, hid]),
        };
        let mut dbu = vec![T::zero(); l * step];
        for k in (0..l).rev() {
            let xk = &cache.states[k];
            let dz: Vec<T> = dx_all.data()[k * step..(k + 1) * step]
                .iter()
                .zip(carry.data())
                .zip(xk.data())
                .map(|((&g, &c), &x)| (g + c) * (T::one() - x * x))
                .collect();
            dbu[k * step..(k + 1) * step].copy_from_slice(&dz);
            let dz = Tensor::new(vec![b, h, w, hid], dz)?;
            let (dprev, ga) = conv2d_backward(&self.a, &cache.prev_cols[k], &dz, true)?;
            accumulate(grad.a.data_mut(), ga.data());
            carry = dprev.expect("input grad");
        }
        let dbu = Tensor::new(vec![l * b, h, w, hid], dbu)?;
        let (du, gb) = conv2d_backward(&self.b, &cache.u_cols, &dbu, true)?;
        accumulate(grad.b.data_mut(), gb.data());
        Ok((du.expect("input grad").reshape(&[l, b, h, w, uc])?, carry))
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.set_flat(&vec![T::zero(); z.param_count()]);
        z
    }

    fn sequential(&self) -> bool {
        true
    }

    fn scan_stats(_cache: &Self::Cache, l: usize) -> (usize, usize) {
        (l, l)
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Two 3×3 convolutions with a gelu between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPair<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

pub struct PairCache<T> {
    c1: ConvCache<T>,
    z1: Tensor<T>,
    c2: ConvCache<T>,
}

impl<T: Real> ConvPair<T> {
    pub fn init(f_in: usize, mid: usize, f_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1: Conv::init(mid, f_in, 3, 1.0, rng)?,
            conv2: Conv::init(f_out, mid, 3, 1.0, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PairCache<T>)> {
        let (z1, c1) = self.conv1.forward(x)?;
        let (y, c2) = self.conv2.forward(&z1.map(gelu))?;
        Ok((y, PairCache { c1, z1, c2 }))
    }

    pub fn backward(&self, cache: &PairCache<T>, dy: &Tensor<T>, grad: &mut Self, need_input: bool) -> Result<Option<Tensor<T>>> {
        let dg = self.conv2.backward(&cache.c2, dy, &mut grad.conv2, true)?.expect("input grad");
        let dz = Tensor::new(
            dg.shape().to_vec(),
            dg.data().iter().zip(cache.z1.data()).map(|(&d, &z)| d * gelu_grad(z)).collect(),
        )?;
        self.conv1.backward(&cache.c1, &dz, &mut grad.conv1, need_input)
    }
}

impl<T: Real> Params<T> for ConvPair<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.conv1.params(&format!("{prefix}conv1."), out);
        self.conv2.params(&format!("{prefix}conv2."), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.conv1.params_mut(&format!("{prefix}conv1."), out);
        self.conv2.params_mut(&format!("{prefix}conv2."), out);
    }
}

/// encoder → (x + layer(x)) per layer → decoder
#[derive(Clone, Debug, PartialEq)]
pub struct Stack<T, L> {
    pub spec: ModelSpec,
    pub encoder: ConvPair<T>,
    pub layers: Vec<L>,
    pub decoder: ConvPair<T>,
}

pub type ConvS5Model<T> = Stack<T, ConvS5Layer<T>>;
pub type ConvRnnModel<T> = Stack<T, ConvRnnLayer<T>>;

pub struct StackCache<T, C> {
    shape: Vec<usize>,
    enc: PairCache<T>,
    layers: Vec<C>,
    dec: PairCache<T>,
}

impl<T: Real> ConvS5Model<T> {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if spec.p % 2 != 0 {
            return Err(invalid(format!("state size must be even, got {}", spec.p)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = spec.layer_config();
        let layers = (0..spec.layers)
            .map(|i| ConvS5Layer::init(&cfg, seed.wrapping_add(1000 + i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            encoder: ConvPair::init(spec.data_channels, spec.u, spec.u, &mut rng)?,
            layers,
            decoder: ConvPair::init(spec.u, spec.u, spec.data_channels, &mut rng)?,
        })
    }

    pub fn to_container(&self, c: &mut Container) {
        self.spec.to_container(c);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.dynamics.to_container(&format!("layer{i}.dyn."), c);
        }
        let mut named = Vec::new();
        self.params("", &mut named);
        for (name, data) in named {
            c.push_real(format!("param.{name}"), &[data.len()], data);
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let spec = ModelSpec::from_container(c)?;
        let mut model = Self::init(&spec, 0)?;
        load_params(&mut model, c)?;
        Ok(model)
    }
}

impl<T: Real> ConvRnnModel<T> {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..spec.layers)
            .map(|i| ConvRnnLayer::init(spec.p, spec.u, spec.kb, spec.kc, spec.activation, seed.wrapping_add(1000 + i as u64)))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            encoder: ConvPair::init(spec.data_channels, spec.u, spec.u, &mut rng)?,
            layers,
            decoder: ConvPair::init(spec.u, spec.u, spec.data_channels, &mut rng)?,
        })
    }
}

/// Overwrite parameters from `param.*` entries.
pub fn load_params<T: Real, P: Params<T>>(model: &mut P, c: &Container) -> Result<()> {
    let mut named = Vec::new();
    model.params_mut("", &mut named);
    for (name, dst) in named {
        let v: Vec<T> = c.real_vec(&format!("param.{name}"))?;
        if v.len() != dst.len() {
            return Err(invalid(format!("parameter {name} has {} values, expected {}", v.len(), dst.len())));
        }
        dst.copy_from_slice(&v);
    }
    Ok(())
}

impl<T: Real, L: SeqLayer<T>> Params<T> for Stack<T, L> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.encoder.params(&format!("{prefix}encoder."), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("{prefix}layer{i}."), out);
        }
        self.decoder.params(&format!("{prefix}decoder."), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.encoder.params_mut(&format!("{prefix}encoder."), out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_mut(&format!("{prefix}layer{i}."), out);
        }
        self.decoder.params_mut(&format!("{prefix}decoder."), out);
    }
}

impl<T: Real, L: SeqLayer<T>> Stack<T, L> {
    pub fn zero_states(&self, batch: usize, h: usize, w: usize) -> Vec<L::State> {
        self.layers.iter().map(|l| l.zero_state(batch, h, w)).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            encoder: {
                let mut e = self.encoder.clone();
                e.set_flat(&vec![T::zero(); e.param_count()]);
                e
            },
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            decoder: {
                let mut d = self.decoder.clone();
                d.set_flat(&vec![T::zero(); d.param_count()]);
                d
            },
        }
    }

    /// Forward over `frames: [L, batch, H, W, C]` keeping everything needed
    /// for [`Self::backward`].
    pub fn forward(
        &self,
        frames: &Tensor<T>,
        states: &[L::State],
        opts: &ScanOptions,
    ) -> Result<(Tensor<T>, Vec<L::State>, StackCache<T, L::Cache>)> {
        let s = frames.shape().to_vec();
        if s.len() != 5 || s[4] != self.spec.data_channels {
            return Err(shape_err("model frames", &s, &[0, 0, 0, 0, self.spec.data_channels]));
        }
        if states.len() != self.layers.len() {
            return Err(invalid(format!("{} states for {} layers", states.len(), self.layers.len())));
        }
        let (l, b, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
        let (enc, enc_cache) = self.encoder.forward(&frames.clone().reshape(&[l * b, h, w, c])?)?;
        let mut x = enc.reshape(&[l, b, h, w, self.spec.u])?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut new_states = Vec::with_capacity(self.layers.len());
        for (i, (layer, st)) in self.layers.iter().zip(states).enumerate() {
            let (y, xl, cache) = layer.forward(&x, st, opts, i)?;
            x.add_assign(&y)?;
            caches.push(cache);
            new_states.push(xl);
        }
        let (pred, dec_cache) = self.decoder.forward(&x.reshape(&[l * b, h, w, self.spec.u])?)?;
        Ok((
            pred.reshape(&[l, b, h, w, c])?,
            new_states,
            StackCache { shape: s, enc: enc_cache, layers: caches, dec: dec_cache },
        ))
    }

    pub fn apply(&self, frames: &Tensor<T>, states: &[L::State], opts: &ScanOptions) -> Result<(Tensor<T>, Vec<L::State>)> {
        let (p, s, _) = self.forward(frames, states, opts)?;
        Ok((p, s))
    }

    /// Gradients for dL/d(predictions) = `d_pred` and optional dL/d(final states).
    pub fn backward(
        &self,
        cache: &StackCache<T, L::Cache>,
        d_pred: &Tensor<T>,
        d_states: Option<&[L::State]>,
        opts: &ScanOptions,
    ) -> Result<(Self, Vec<L::State>)> {
        let s = &cache.shape;
        let (l, b, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
        let u = self.spec.u;
        let mut grad = self.zeros_like();
        let dx = self
            .decoder
            .backward(&cache.dec, &d_pred.clone().reshape(&[l * b, h, w, c])?, &mut grad.decoder, true)?
            .expect("input grad");
        let mut dx = dx.reshape(&[l, b, h, w, u])?;
        let mut d_x0 = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let dl = d_states.map(|d| &d[i]);
            let (du, dx0) = self.layers[i].backward(&cache.layers[i], &dx, dl, &mut grad.layers[i], opts)?;
            dx.add_assign(&du)?;
            d_x0.push(dx0);
        }
        d_x0.reverse();
        self.encoder
            .backward(&cache.enc, &dx.reshape(&[l * b, h, w, u])?, &mut grad.encoder, false)?;
        Ok((grad, d_x0))
    }

    /// Teacher-forced next-frame loss over `seq: [L, batch, H, W, C]`:
    /// inputs are frames `0..L−1`, targets `1..L`.
    pub fn loss_and_grad(&self, seq: &Tensor<T>, loss: Loss, opts: &ScanOptions) -> Result<(f64, Self)> {
        let l = seq.shape()[0];
        if l < 2 {
            return Err(invalid("need at least two frames for next-frame loss"));
        }
        let inputs = seq.slice0(0, l - 1);
        let targets = seq.slice0(1, l);
        let s = seq.shape();
        let states = self.zero_states(s[1], s[2], s[3]);
        let (pred, _, cache) = self.forward(&inputs, &states, opts)?;
        let (value, g) = loss.eval(pred.data(), targets.data());
        let d_pred = Tensor::new(pred.shape().to_vec(), g)?;
        let (grad, _) = self.backward(&cache, &d_pred, None, opts)?;
        Ok((value, grad))
    }

    pub fn loss(&self, seq: &Tensor<T>, loss: Loss, opts: &ScanOptions) -> Result<f64> {
        let l = seq.shape()[0];
        let s = seq.shape();
        let states = self.zero_states(s[1], s[2], s[3]);
        let (pred, _) = self.apply(&seq.slice0(0, l - 1), &states, opts)?;
        Ok(loss.eval(pred.data(), seq.slice0(1, l).data()).0)
    }

    /// Consume `context` once, then feed each predicted frame back in.
    /// Returns `[horizon, batch, H, W, C]` and the wall time of each step.
    pub fn autoregress(&self, context: &Tensor<T>, horizon: usize, opts: &ScanOptions) -> Result<(Tensor<T>, Vec<Duration>)> {
        let s = context.shape().to_vec();
        if s.len() != 5 || s[0] == 0 {
            return Err(shape_err("autoregress context", &s, &[1, 0, 0, 0, self.spec.data_channels]));
        }
        let mut frame_shape = s.clone();
        frame_shape[0] = 1;
        if horizon == 0 {
            return Ok((Tensor::zeros(&{
                let mut z = s.clone();
                z[0] = 0;
                z
            }), Vec::new()));
        }
        let states = self.zero_states(s[1], s[2], s[3]);
        let t0 = Instant::now();
        let (pred, mut states) = self.apply(context, &states, opts)?;
        let mut next = pred.slice0(s[0] - 1, s[0]);
        let mut times = vec![t0.elapsed()];
        let mut out = Vec::with_capacity(horizon);
        out.push(next.clone());
        for _ in 1..horizon {
            let t = Instant::now();
            let (p, st) = self.apply(&next, &states, opts)?;
            states = st;
            next = p;
            times.push(t.elapsed());
            out.push(next.clone());
        }
        Ok((Tensor::concat0(&out)?, times))
    }
}

/// `[L, B, H, W, P/2]` complex states of a model layer, exposed for checks.
pub fn states_as_real<T: Real>(x: &Tensor<Complex<T>>) -> &[T] {
    complex_as_real(x.data())
}

pub fn dynamics_of<T: Real>(model: &ConvS5Model<T>) -> Vec<&DiagDynamics<T>> {
    model.layers.iter().map(|l| &l.dynamics).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::check_gradients;
    use rand::Rng;

    fn small_spec(layers: usize) -> ModelSpec {
        ModelSpec { layers, p: 4, u: 3, kb: 3, kc: 3, dt_min: 0.05, dt_max: 0.5, ..Default::default() }
    }

    fn frames(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_layers_is_decoder_of_encoder() {
        let m = ConvS5Model::<f64>::init(&small_spec(0), 1).unwrap();
        let x = frames(&[3, 2, 5, 5, 1], 2);
        let (y, st) = m.apply(&x, &[], &ScanOptions::default()).unwrap();
        assert!(st.is_empty());
        let flat = x.clone().reshape(&[6, 5, 5, 1]).unwrap();
        let (e, _) = m.encoder.forward(&flat).unwrap();
        let (d, _) = m.decoder.forward(&e).unwrap();
        assert_eq!(y.into_data(), d.into_data());
    }

    #[test]
    fn construction_is_deterministic() {
        let a = ConvS5Model::<f32>::init(&small_spec(2), 7).unwrap();
        let b = ConvS5Model::<f32>::init(&small_spec(2), 7).unwrap();
        let c = ConvS5Model::<f32>::init(&small_spec(2), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flat(), c.flat());
    }

    #[test]
    fn chunked_application_carries_state() {
        let m = ConvS5Model::<f64>::init(&small_spec(2), 3).unwrap();
        let x = frames(&[6, 1, 6, 6, 1], 4);
        let opts = ScanOptions::default();
        let z = m.zero_states(1, 6, 6);
        let (full, _) = m.apply(&x, &z, &opts).unwrap();
        let (a, s) = m.apply(&x.slice0(0, 4), &z, &opts).unwrap();
        let (b, _) = m.apply(&x.slice0(4, 6), &s, &opts).unwrap();
        let joined = Tensor::concat0(&[a, b]).unwrap();
        assert!(full.max_abs_diff(&joined) < 1e-12);
    }

    #[test]
    fn autoregress_matches_manual_feedback() {
        let m = ConvS5Model::<f64>::init(&small_spec(1), 5).unwrap();
        let ctx = frames(&[3, 1, 5, 5, 1], 6);
        let opts = ScanOptions::default();
        let (gen, times) = m.autoregress(&ctx, 3, &opts).unwrap();
        assert_eq!(gen.shape(), &[3, 1, 5, 5, 1]);
        assert_eq!(times.len(), 3);
        let (p, _) = m.apply(&ctx, &m.zero_states(1, 5, 5), &opts).unwrap();
        let first = p.slice0(2, 3);
        assert!(gen.slice0(0, 1).max_abs_diff(&first) < 1e-12);
        let seq = Tensor::concat0(&[ctx.clone(), first, gen.slice0(1, 2)]).unwrap();
        let (p2, _) = m.apply(&seq, &m.zero_states(1, 5, 5), &opts).unwrap();
        assert!(gen.slice0(2, 3).max_abs_diff(&p2.slice0(4, 5)) < 1e-10);
        let (none, t) = m.autoregress(&ctx, 0, &opts).unwrap();
        assert_eq!(none.shape()[0], 0);
        assert!(t.is_empty());
    }

    #[test]
    fn convs5_model_gradients() {
        let mut spec = small_spec(2);
        spec.use_d = true;
        let m = ConvS5Model::<f64>::init(&spec, 9).unwrap();
        let seq = frames(&[4, 2, 5, 5, 1], 10);
        let opts = ScanOptions::default();
        for loss in [Loss::Mse, Loss::L1L2] {
            let (_, grad) = m.loss_and_grad(&seq, loss, &opts).unwrap();
            let report = check_gradients(&m, &grad, 4, 1e-5, |p| p.loss(&seq, loss, &opts)).unwrap();
            assert!(report.checked >= 50);
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn convrnn_model_gradients() {
        let m = ConvRnnModel::<f64>::init(&small_spec(2), 9).unwrap();
        let seq = frames(&[4, 2, 5, 5, 1], 10);
        let opts = ScanOptions::default();
        let (_, grad) = m.loss_and_grad(&seq, Loss::Mse, &opts).unwrap();
        let report = check_gradients(&m, &grad, 5, 1e-5, |p| p.loss(&seq, Loss::Mse, &opts)).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn container_roundtrip_preserves_outputs() {
        let m = ConvS5Model::<f32>::init(&small_spec(2), 11).unwrap();
        let mut c = Container::default();
        m.to_container(&mut c);
        let back = ConvS5Model::<f32>::from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let m = ConvS5Model::<f64>::init(&small_spec(1), 1).unwrap();
        let x = frames(&[2, 1, 4, 4, 2], 1);
        assert!(m.apply(&x, &m.zero_states(1, 4, 4), &ScanOptions::default()).is_err());
    }
}
