//! The ConvS5 layer: discretize the diagonal dynamics, reshape them into a
//! pointwise state kernel and an input kernel, scan, project the complex
//! states back to real features with the output kernel, then normalize and
//! apply the activation block.
//!
//! The output projection uses the conjugate-pair economy: with the mirrored
//! half of the spectrum implicit, `y = 2·Re(C ∗ x)`.

use num_complex::Complex;
use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::grad::{discretize_backward, recurrence_adjoint};
use crate::nn::{uniform, ActCache, ActivationBlock, ActivationKind, LayerNorm, NormCache, Params};
use crate::scalar::{complex_as_real, complex_as_real_mut, real_as_complex, Real, Scalar};
use crate::scan::{diag_elements, scan_parallel_with, scan_with, ScanOptions, ScanStats, StateOp};
use crate::ssm_init::{DiagDynamics, Discretized};
use crate::tensor::{conv2d, conv2d_backward, conv2d_cols_with, conv_cols, conv_cols_adjoint, gemm_rows, ConvKernel, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerConfig {
    /// Full state size (even).
    pub p: usize,
    pub u: usize,
    pub kb: usize,
    pub kc: usize,
    pub use_d: bool,
    pub activation: ActivationKind,
    pub dt_min: f64,
    pub dt_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvS5Layer<T> {
    pub dynamics: DiagDynamics<T>,
    /// `[U, P/2, kC, kC]`
    pub c_kernel: ConvKernel<Complex<T>>,
    /// Optional `[U, U, 1, 1]` feedthrough.
    pub d_kernel: Option<ConvKernel<T>>,
    pub norm: LayerNorm<T>,
    pub activation: ActivationBlock<T>,
}

/// Everything the backward pass needs from a forward pass.
pub struct LayerCache<T> {
    shape: Vec<usize>,
    u_cols: Tensor<T>,
    b_cols: Option<Tensor<T>>,
    disc: Discretized<T>,
    x0: Tensor<Complex<T>>,
    states: Tensor<Complex<T>>,
    x_cols: Tensor<T>,
    norm: NormCache<T>,
    act: ActCache<T>,
    pub stats: ScanStats,
}

impl<T: Real> ConvS5Layer<T> {
    pub fn init(cfg: &LayerConfig, seed: u64) -> Result<Self> {
        if cfg.kc % 2 == 0 {
            return Err(invalid(format!("output kernel width must be odd, got {}", cfg.kc)));
        }
        let dynamics = DiagDynamics::init(cfg.p, cfg.u, cfg.kb, cfg.dt_min, cfg.dt_max, seed)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let half = cfg.p / 2;
        let n = cfg.u * half * cfg.kc * cfg.kc;
        let bound = 0.5 / ((half * cfg.kc * cfg.kc) as f64).sqrt();
        let c = (0..n)
            .map(|_| Complex::new(T::of(rng.gen_range(-bound..=bound)), T::of(rng.gen_range(-bound..=bound))))
            .collect();
        let d_kernel = if cfg.use_d {
            Some(ConvKernel::from_vec(cfg.u, cfg.u, 1, uniform(&mut rng, cfg.u * cfg.u, 1.0 / (cfg.u as f64).sqrt()))?)
        } else {
            None
        };
        Ok(Self {
            dynamics,
            c_kernel: ConvKernel::from_vec(cfg.u, half, cfg.kc, c)?,
            d_kernel,
            norm: LayerNorm::new(cfg.u),
            activation: ActivationBlock::init(cfg.activation, cfg.u, &mut rng)?,
        })
    }

    pub fn u(&self) -> usize {
        self.dynamics.u
    }

    pub fn half(&self) -> usize {
        self.dynamics.half()
    }

    /// Gradient buffer with this layer's shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.set_flat(&vec![T::zero(); z.param_count()]);
        z
    }

    /// `[P/2, U, kB, kB]` input kernel from the discretized `b̄`.
    pub fn input_kernel(&self, disc: &Discretized<T>) -> Result<ConvKernel<Complex<T>>> {
        let d = &self.dynamics;
        ConvKernel::from_vec(d.half(), d.u, d.kb, disc.b_bar.clone())
    }

    /// `b̄` as a real `[P, U·kB²]` matrix with rows alternating (Re, Im)
    /// and columns in [`conv_cols`] order.
    fn input_matrix_real(disc: &Discretized<T>, half: usize, u: usize, kb: usize) -> Vec<T> {
        let (kk, cols) = (kb * kb, u * kb * kb);
        let mut out = vec![T::zero(); 2 * half * cols];
        for p in 0..half {
            for q in 0..u {
                for t in 0..kk {
                    let z = disc.b_bar[p * cols + q * kk + t];
                    out[2 * p * cols + t * u + q] = z.re;
                    out[(2 * p + 1) * cols + t * u + q] = z.im;
                }
            }
        }
        out
    }

    /// `2·Re(C ∗ x)` as a real kernel over interleaved (Re, Im) channels.
    fn output_kernel_real(&self) -> Result<ConvKernel<T>> {
        let (u, half, k) = (self.c_kernel.f_out(), self.c_kernel.f_in(), self.c_kernel.width());
        let kk = k * k;
        let two = T::of(2.0);
        let mut out = vec![T::zero(); u * 2 * half * kk];
        for o in 0..u {
            for p in 0..half {
                for t in 0..kk {
                    let z = self.c_kernel.data()[(o * half + p) * kk + t];
                    out[(o * 2 * half + 2 * p) * kk + t] = two * z.re;
                    out[(o * 2 * half + 2 * p + 1) * kk + t] = -two * z.im;
                }
            }
        }
        ConvKernel::from_vec(u, 2 * half, k, out)
    }

    fn check_shapes(&self, u: &Tensor<T>, x0: &Tensor<Complex<T>>) -> Result<(usize, usize, usize, usize)> {
        let s = u.shape();
        if s.len() != 5 || s[4] != self.u() {
            return Err(shape_err("layer input", s, &[0, 0, 0, 0, self.u()]));
        }
        let want = [s[1], s[2], s[3], self.half()];
        if x0.shape() != want {
            return Err(shape_err("layer x0", x0.shape(), &want));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Forward pass over `u: [L, batch, H, W, U]` from state `x0: [batch, H, W, P/2]`.
    /// Returns the layer output, the final state and a cache for [`Self::backward`].
    pub fn forward(
        &self,
        u: &Tensor<T>,
        x0: &Tensor<Complex<T>>,
        opts: &ScanOptions,
        layer_index: usize,
    ) -> Result<(Tensor<T>, Tensor<Complex<T>>, LayerCache<T>)> {
        let (l, b, h, w) = self.check_shapes(u, x0)?;
        let half = self.half();
        let d = &self.dynamics;
        let cols = d.cols();
        let disc = d.discretize();
        let flat_u = u.clone().reshape(&[l * b, h, w, d.u])?;

        // effective inputs B̄ ∗ u_k, computed for all timesteps at once
        let u_cols = conv_cols(&flat_u, d.kb)?;
        let n = l * b * h * w;
        let br = Self::input_matrix_real(&disc, half, d.u, d.kb);
        let workers = if opts.sequential { 1 } else { opts.workers };
        let bu = gemm_rows(workers, n, cols, 2 * half, u_cols.data(), &br, 1, cols);
        let bu = Tensor::new(vec![l, b, h, w, half], real_as_complex(&bu).to_vec())?;

        let elements = diag_elements(&disc.lambda_bar, &bu)?;
        let (states, stats) = scan_with(&elements, x0, opts)?;
        let per_step = b * h * w * half;
        if let Some(bad) = states.data().iter().position(|z| !crate::scalar::Scalar::is_finite(*z)) {
            return Err(Error::NonFinite {
                layer: layer_index,
                step: bad / per_step,
            });
        }
        let x_last = states.index0(l - 1);

        // y = 2·Re(C ∗ x) (+ D ∗ u)
        let states_real = Tensor::new(vec![l * b, h, w, 2 * half], complex_as_real(states.data()).to_vec())?;
        let x_cols = conv_cols(&states_real, self.c_kernel.width())?;
        let mut y = conv2d_cols_with(&self.output_kernel_real()?, &x_cols, workers)?;
        let b_cols = if let Some(dk) = &self.d_kernel {
            y.add_assign(&conv2d(dk, &flat_u)?)?;
            Some(flat_u.clone())
        } else {
            None
        };

        let (normed, norm) = self.norm.forward(&y);
        let (out, act) = self.activation.forward(&normed)?;
        let per_out = b * h * w * d.u;
        if let Some(bad) = out.data().iter().position(|v| !Scalar::is_finite(*v)) {
            return Err(Error::NonFinite {
                layer: layer_index,
                step: bad / per_out,
            });
        }
        let out = out.reshape(&[l, b, h, w, d.u])?;
        let cache = LayerCache {
            shape: u.shape().to_vec(),
            u_cols,
            b_cols,
            disc,
            x0: x0.clone(),
            states,
            x_cols,
            norm,
            act,
            stats,
        };
        Ok((out, x_last, cache))
    }

    /// Reverse pass. `d_out` is dL/d(output); `d_last` optionally adds dL/dx_L.
    /// Accumulates parameter gradients into `grad` and returns (dL/du, dL/dx0).
    pub fn backward(
        &self,
        cache: &LayerCache<T>,
        d_out: &Tensor<T>,
        d_last: Option<&Tensor<Complex<T>>>,
        grad: &mut Self,
        opts: &ScanOptions,
    ) -> Result<(Tensor<T>, Tensor<Complex<T>>)> {
        let s = &cache.shape;
        let (l, b, h, w, u) = (s[0], s[1], s[2], s[3], s[4]);
        let half = self.half();
        let d = &self.dynamics;
        let cols = d.cols();
        let n = l * b * h * w;

        let d_out = d_out.clone().reshape(&[l * b, h, w, u])?;
        let d_normed = self.activation.backward(&cache.act, &d_out, &mut grad.activation)?;
        let dy = self.norm.backward(&cache.norm, &d_normed, &mut grad.norm);

        let mut du = Tensor::<T>::zeros(&[l * b, h, w, u]);
        if let (Some(dk), Some(ucols)) = (&self.d_kernel, &cache.b_cols) {
            let (dx, gk) = conv2d_backward(dk, ucols, &dy, true)?;
            du.add_assign(&dx.expect("input grad"))?;
            if let Some(g) = grad.d_kernel.as_mut() {
                for (a, &v) in g.data_mut().iter_mut().zip(gk.data()) {
                    *a += v;
                }
            }
        }

        // through y = Cr ∗ x_real
        let cr = self.output_kernel_real()?;
        let (dxr, dcr) = conv2d_backward(&cr, &cache.x_cols, &dy, true)?;
        let kk = self.c_kernel.width() * self.c_kernel.width();
        let two = T::of(2.0);
        for o in 0..u {
            for p in 0..half {
                for t in 0..kk {
                    let gre = dcr.data()[(o * 2 * half + 2 * p) * kk + t];
                    let gim = dcr.data()[(o * 2 * half + 2 * p + 1) * kk + t];
                    grad.c_kernel.data_mut()[(o * half + p) * kk + t] += Complex::new(two * gre, -two * gim);
                }
            }
        }
        let mut g_states = Tensor::new(
            cache.states.shape().to_vec(),
            real_as_complex(dxr.expect("input grad").data()).to_vec(),
        )?;
        if let Some(dl) = d_last {
            let off = (l - 1) * b * h * w * half;
            for (g, &v) in g_states.data_mut()[off..].iter_mut().zip(dl.data()) {
                *g += v;
            }
        }

        let adj = recurrence_adjoint(&cache.disc.lambda_bar, &cache.states, &cache.x0, &g_states, opts)?;

        // through bu = u_cols · Brᵀ
        let g_bu = complex_as_real(adj.grad_bu.data());
        let mut g_br = vec![T::zero(); 2 * half * cols];
        T::gemm(2 * half, n, cols, T::one(), g_bu, 1, 2 * half, cache.u_cols.data(), cols, 1, T::zero(), &mut g_br, cols, 1);
        let kk_b = d.kb * d.kb;
        let g_b_bar: Vec<Complex<T>> = (0..half * cols)
            .map(|i| {
                let (p, v) = (i / cols, i % cols);
                let tap = (v % kk_b) * u + v / kk_b;
                Complex::new(g_br[2 * p * cols + tap], g_br[(2 * p + 1) * cols + tap])
            })
            .collect();
        let br = Self::input_matrix_real(&cache.disc, half, u, d.kb);
        let workers = if opts.sequential { 1 } else { opts.workers };
        let g_ucols = gemm_rows(workers, n, 2 * half, cols, g_bu, &br, cols, 1);
        let g_ucols = Tensor::new(vec![l * b, h, w, cols], g_ucols)?;
        du.add_assign(&conv_cols_adjoint(&g_ucols, d.kb, u)?)?;

        discretize_backward(d, &adj.grad_lambda_bar, &g_b_bar, &mut grad.dynamics);
        Ok((du.reshape(&[l, b, h, w, u])?, adj.grad_x0))
    }

    /// Convenience forward returning `(y, x_L)`.
    pub fn apply(&self, u: &Tensor<T>, x0: &Tensor<Complex<T>>, opts: &ScanOptions) -> Result<(Tensor<T>, Tensor<Complex<T>>)> {
        let (y, x, _) = self.forward(u, x0, opts, 0)?;
        Ok((y, x))
    }

    /// The complex output `C ∗ x` over the explicitly mirrored full state,
    /// before taking the real part, feedthrough, norm and activation.
    pub fn pre_projection_output(&self, u: &Tensor<T>, x0: &Tensor<Complex<T>>) -> Result<Tensor<Complex<T>>> {
        let (l, b, h, w) = self.check_shapes(u, x0)?;
        let d = &self.dynamics;
        let half = self.half();
        let p = d.p;
        let disc = d.discretize();
        let mut lam = disc.lambda_bar.clone();
        lam.extend(disc.lambda_bar.iter().map(|z| z.conj()));
        let mut bbar = disc.b_bar.clone();
        bbar.extend(disc.b_bar.iter().map(|z| z.conj()));
        let b_kernel = ConvKernel::from_vec(p, d.u, d.kb, bbar)?;
        let (uo, kc) = (self.c_kernel.f_out(), self.c_kernel.width());
        let kk = kc * kc;
        let mut c_full = vec![Complex::new(T::zero(), T::zero()); uo * p * kk];
        for o in 0..uo {
            for q in 0..half {
                for t in 0..kk {
                    let z = self.c_kernel.data()[(o * half + q) * kk + t];
                    c_full[(o * p + q) * kk + t] = z;
                    c_full[(o * p + half + q) * kk + t] = z.conj();
                }
            }
        }
        let c_kernel = ConvKernel::from_vec(uo, p, kc, c_full)?;
        let uc = u.map(|v| Complex::new(v, T::zero())).reshape(&[l * b, h, w, d.u])?;
        let bu = conv2d(&b_kernel, &uc)?.reshape(&[l, b, h, w, p])?;
        let mut x0_full = Tensor::zeros(&[b, h, w, p]);
        for (dst, src) in x0_full.data_mut().chunks_exact_mut(p).zip(x0.data().chunks_exact(half)) {
            for q in 0..half {
                dst[q] = src[q];
                dst[half + q] = src[q].conj();
            }
        }
        let elements = diag_elements(&lam, &bu)?;
        let (states, _) = scan_parallel_with(&elements, &x0_full, &ScanOptions::default())?;
        let y = conv2d(&c_kernel, &states.reshape(&[l * b, h, w, p])?)?;
        y.reshape(&[l, b, h, w, uo])
    }

    /// Pointwise state kernel `[P/2, P/2, 1, 1]` with `λ̄` on its diagonal.
    pub fn state_kernel(&self, disc: &Discretized<T>) -> Result<ConvKernel<Complex<T>>> {
        let half = self.half();
        let mut m = vec![Complex::new(T::zero(), T::zero()); half * half];
        for i in 0..half {
            m[i * half + i] = disc.lambda_bar[i];
        }
        ConvKernel::from_vec(half, half, 1, m)
    }

    pub fn state_op(&self, disc: &Discretized<T>) -> StateOp<T> {
        StateOp::Diag(disc.lambda_bar.clone())
    }
}

impl<T: Real> Params<T> for ConvS5Layer<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        self.dynamics.params(&format!("{prefix}dyn."), out);
        out.push((format!("{prefix}c_kernel"), complex_as_real(self.c_kernel.data())));
        if let Some(d) = &self.d_kernel {
            out.push((format!("{prefix}d_kernel"), d.data()));
        }
        self.norm.params(&format!("{prefix}norm."), out);
        self.activation.params(&format!("{prefix}act."), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        self.dynamics.params_mut(&format!("{prefix}dyn."), out);
        out.push((format!("{prefix}c_kernel"), complex_as_real_mut(self.c_kernel.data_mut())));
        if let Some(d) = &mut self.d_kernel {
            out.push((format!("{prefix}d_kernel"), d.data_mut()));
        }
        self.norm.params_mut(&format!("{prefix}norm."), out);
        self.activation.params_mut(&format!("{prefix}act."), out);
    }
}

impl<T: Real> Params<T> for DiagDynamics<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [T])>) {
        out.push((format!("{prefix}lambda_log_neg_re"), &self.lambda_log_neg_re));
        out.push((format!("{prefix}lambda_im"), &self.lambda_im));
        out.push((format!("{prefix}b_tilde"), complex_as_real(&self.b_tilde)));
        out.push((format!("{prefix}log_dt"), &self.log_dt));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        out.push((format!("{prefix}lambda_log_neg_re"), &mut self.lambda_log_neg_re));
        out.push((format!("{prefix}lambda_im"), &mut self.lambda_im));
        out.push((format!("{prefix}b_tilde"), complex_as_real_mut(&mut self.b_tilde)));
        out.push((format!("{prefix}log_dt"), &mut self.log_dt));
    }
}
