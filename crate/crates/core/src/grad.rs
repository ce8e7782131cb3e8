//! Hand-written adjoints for the diagonal recurrence and its discretization,
//! a finite-difference gradient checker, and the Adam optimizer.

use num_complex::Complex;
use serde::Serialize;

use crate::container::Container;
use crate::error::{invalid, shape_err, Result};
use crate::nn::Params;
use crate::scalar::Real;
use crate::scan::{diag_elements, scan_with, ScanOptions};
use crate::ssm_init::{zoh_factor, DiagDynamics, LAMBDA_EPS};
use crate::tensor::Tensor;

/// Gradients of the recurrence `x_k = λ̄ ⊙ x_{k−1} + bu_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrenceAdjoint<T> {
    /// `[L, ...]`, same shape as the states.
    pub grad_bu: Tensor<Complex<T>>,
    /// Summed over batch and pixels.
    pub grad_lambda_bar: Vec<Complex<T>>,
    pub grad_x0: Tensor<Complex<T>>,
}

/// Backpropagate through the diagonal recurrence given the forward states
/// `[L, ..., P]`, the initial state `[..., P]` and `dL/dx_k` for every step.
///
/// The adjoint `ḡ_k = gs_k + conj(λ̄) ⊙ ḡ_{k+1}` is itself a diagonal scan,
/// run in reverse time with the same parallel schedule as the forward pass.
pub fn recurrence_adjoint<T: Real>(
    lambda_bar: &[Complex<T>],
    states: &Tensor<Complex<T>>,
    x0: &Tensor<Complex<T>>,
    grad_states: &Tensor<Complex<T>>,
    opts: &ScanOptions,
) -> Result<RecurrenceAdjoint<T>> {
    if states.shape() != grad_states.shape() {
        return Err(shape_err("recurrence adjoint", states.shape(), grad_states.shape()));
    }
    let l = states.shape()[0];
    if l == 0 || states.shape()[1..] != *x0.shape() {
        return Err(shape_err("recurrence adjoint x0", x0.shape(), &states.shape()[1..]));
    }
    let p = lambda_bar.len();
    if x0.shape().last() != Some(&p) {
        return Err(shape_err("recurrence adjoint λ̄", &[p], x0.shape()));
    }
    let step = x0.len();
    let conj: Vec<Complex<T>> = lambda_bar.iter().map(|z| z.conj()).collect();
    let mut reversed = Vec::with_capacity(grad_states.len());
    for k in (0..l).rev() {
        reversed.extend_from_slice(&grad_states.data()[k * step..(k + 1) * step]);
    }
    let reversed = Tensor::new(states.shape().to_vec(), reversed)?;
    let elements = diag_elements(&conj, &reversed)?;
    let (adj_rev, _) = scan_with(&elements, &Tensor::zeros(x0.shape()), opts)?;
    let mut grad_bu = Vec::with_capacity(adj_rev.len());
    for k in (0..l).rev() {
        grad_bu.extend_from_slice(&adj_rev.data()[k * step..(k + 1) * step]);
    }
    let grad_bu = Tensor::new(states.shape().to_vec(), grad_bu)?;

    let mut grad_lambda_bar = vec![Complex::new(T::zero(), T::zero()); p];
    for k in 0..l {
        let prev = if k == 0 { x0.data() } else { &states.data()[(k - 1) * step..k * step] };
        let g = &grad_bu.data()[k * step..(k + 1) * step];
        for (i, (x, gv)) in prev.iter().zip(g).enumerate() {
            grad_lambda_bar[i % p] += x.conj() * gv;
        }
    }
    let grad_x0 = Tensor::new(
        x0.shape().to_vec(),
        grad_bu.data()[..step]
            .iter()
            .enumerate()
            .map(|(i, g)| conj[i % p] * g)
            .collect(),
    )?;
    Ok(RecurrenceAdjoint { grad_bu, grad_lambda_bar, grad_x0 })
}

/// Chain `dL/dλ̄` and `dL/db̄` back to the stored parameters
/// (`lambda_log_neg_re`, `lambda_im`, `b_tilde`, `log_dt`), accumulating
/// into `grad`.
pub fn discretize_backward<T: Real>(
    dynamics: &DiagDynamics<T>,
    g_lambda_bar: &[Complex<T>],
    g_b_bar: &[Complex<T>],
    grad: &mut DiagDynamics<T>,
) {
    let half = dynamics.half();
    let cols = dynamics.cols();
    let lambda = dynamics.lambda();
    let dt = dynamics.dt();
    let two = T::of(2.0);
    for p in 0..half {
        let (lam, d) = (lambda[p], dt[p]);
        let lam_bar = (lam * d).exp();
        let f = zoh_factor(lam, d);
        let mut g_f = Complex::new(T::zero(), T::zero());
        for v in 0..cols {
            let i = p * cols + v;
            g_f += dynamics.b_tilde[i].conj() * g_b_bar[i];
            grad.b_tilde[i] += f.conj() * g_b_bar[i];
        }
        let df_dlam = if lam.norm().as_f64() < LAMBDA_EPS {
            Complex::new(d * d / two, T::zero())
        } else {
            (lam_bar * d - f) / lam
        };
        let g_lb = g_lambda_bar[p];
        let g_lam = df_dlam.conj() * g_f + (lam_bar * d).conj() * g_lb;
        let dl_ddt = (g_f.conj() * lam_bar + g_lb.conj() * lam * lam_bar).re;
        grad.log_dt[p] += d * dl_ddt;
        grad.lambda_log_neg_re[p] += -dynamics.lambda_log_neg_re[p].exp() * g_lam.re;
        grad.lambda_im[p] += g_lam.im;
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tensors: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// Compare `analytic` against central differences of `loss` at `checked`
/// scalars spread over every parameter tensor.
pub fn check_gradients<P: Params<f64> + Clone>(
    model: &P,
    analytic: &P,
    per_tensor: usize,
    eps: f64,
    loss: impl Fn(&P) -> Result<f64>,
) -> Result<GradCheckReport> {
    let layout = model.layout();
    let base = model.flat();
    let grads = analytic.flat();
    if grads.len() != base.len() {
        return Err(invalid("gradient layout does not match the model"));
    }
    let mut probe = model.clone();
    let mut report = GradCheckReport { checked: 0, tensors: layout.len(), max_rel_error: 0.0, worst: String::new() };
    for (name, off, len) in layout {
        let picks = per_tensor.min(len);
        for j in 0..picks {
            // spread indices over the tensor deterministically
            let idx = off + (j * len) / picks + ((j * 7919) % (len / picks).max(1));
            let idx = idx.min(off + len - 1);
            let mut w = base.clone();
            w[idx] = base[idx] + eps;
            probe.set_flat(&w);
            let lp = loss(&probe)?;
            w[idx] = base[idx] - eps;
            probe.set_flat(&w);
            let lm = loss(&probe)?;
            let numeric = (lp - lm) / (2.0 * eps);
            let err = (numeric - grads[idx]).abs() / numeric.abs().max(grads[idx].abs()).max(1e-8);
            // entries whose gradient is at round-off level carry no signal
            let err = if numeric.abs().max(grads[idx].abs()) < 1e-9 { 0.0 } else { err };
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{}] analytic {:.6e} numeric {:.6e}", idx - off, grads[idx], numeric);
            }
        }
    }
    Ok(report)
}

/// Adam with linear warmup followed by cosine decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, warmup_steps: 0, total_steps: 0 }
    }
}

impl AdamConfig {
    /// Learning rate at 0-based `step`; `total_steps == 0` disables decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let t = ((step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self { step: 0, m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }

    pub fn to_container(&self, c: &mut Container) {
        c.push_scalar("adam.step", self.step as f64);
        c.push_real("adam.m", &[self.m.len()], &self.m);
        c.push_real("adam.v", &[self.v.len()], &self.v);
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        Ok(Self { step: c.scalar("adam.step")? as u64, m: c.real_vec("adam.m")?, v: c.real_vec("adam.v")? })
    }
}

/// One Adam update in place. Entries with `frozen[i] == true` are left alone.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>, cfg: &AdamConfig, frozen: Option<&[bool]>) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let lr = cfg.lr_at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mhat = state.m[i].as_f64() / c1;
        let vhat = state.v[i].as_f64() / c2;
        let p = params[i].as_f64();
        params[i] = T::of(p - lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p));
    }
}

/// Flat mask freezing every tensor whose name contains one of `patterns`.
pub fn freeze_mask<T: Real, P: Params<T>>(model: &P, patterns: &[&str]) -> Vec<bool> {
    let mut mask = vec![false; model.param_count()];
    for (name, off, len) in model.layout() {
        if patterns.iter().any(|p| name.contains(p)) {
            mask[off..off + len].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::scan_sequential;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type C = Complex<f64>;

    fn rand_c(rng: &mut ChaCha8Rng, n: usize) -> Vec<C> {
        (0..n).map(|_| C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    /// L = Re Σ conj(w_k) x_k for fixed weights w, so dL/dx_k = w_k.
    fn probe_loss(lb: &[C], bu: &Tensor<C>, x0: &Tensor<C>, w: &Tensor<C>) -> f64 {
        let xs = scan_sequential(&diag_elements(lb, bu).unwrap(), x0).unwrap();
        xs.data().iter().zip(w.data()).map(|(x, w)| (w.conj() * x).re).sum()
    }

    #[test]
    fn single_step_adjoint() {
        let lb = vec![C::new(0.3, 0.4)];
        let x0 = Tensor::new(vec![1, 1], vec![C::new(2.0, -1.0)]).unwrap();
        let states = Tensor::new(vec![1, 1, 1], vec![lb[0] * x0.data()[0] + C::new(1.0, 0.0)]).unwrap();
        let g = Tensor::new(vec![1, 1, 1], vec![C::new(1.0, 0.5)]).unwrap();
        let adj = recurrence_adjoint(&lb, &states, &x0, &g, &ScanOptions::default()).unwrap();
        assert_eq!(adj.grad_bu.data(), g.data());
        assert!((adj.grad_lambda_bar[0] - x0.data()[0].conj() * g.data()[0]).norm() < 1e-15);
        assert!((adj.grad_x0.data()[0] - lb[0].conj() * g.data()[0]).norm() < 1e-15);
    }

    #[test]
    fn memoryless_adjoint_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lb = vec![C::new(0.0, 0.0); 2];
        let bu = Tensor::new(vec![4, 3, 1, 2], rand_c(&mut rng, 24)).unwrap();
        let x0 = Tensor::zeros(&[3, 1, 2]);
        let states = scan_sequential(&diag_elements(&lb, &bu).unwrap(), &x0).unwrap();
        let g = Tensor::new(vec![4, 3, 1, 2], rand_c(&mut rng, 24)).unwrap();
        let adj = recurrence_adjoint(&lb, &states, &x0, &g, &ScanOptions::default()).unwrap();
        assert_eq!(adj.grad_bu.data(), g.data());
        assert!(adj.grad_x0.max_abs() == 0.0);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (l, n, p) = (6, 3, 2);
        let lb = vec![C::new(0.6, 0.3), C::new(-0.2, 0.7)];
        let bu = Tensor::new(vec![l, n, 1, p], rand_c(&mut rng, l * n * p)).unwrap();
        let x0 = Tensor::new(vec![n, 1, p], rand_c(&mut rng, n * p)).unwrap();
        let w = Tensor::new(vec![l, n, 1, p], rand_c(&mut rng, l * n * p)).unwrap();
        let states = scan_sequential(&diag_elements(&lb, &bu).unwrap(), &x0).unwrap();
        let opts = ScanOptions { workers: 2, chunk_len: Some(4), ..Default::default() };
        let adj = recurrence_adjoint(&lb, &states, &x0, &w, &opts).unwrap();
        let eps = 1e-6;
        // the gradient of a real loss wrt z is ∂/∂Re + i ∂/∂Im
        let fd = |f: &dyn Fn(C) -> f64| C::new((f(C::new(eps, 0.0)) - f(C::new(-eps, 0.0))) / (2.0 * eps), (f(C::new(0.0, eps)) - f(C::new(0.0, -eps))) / (2.0 * eps));
        for q in 0..p {
            let g = fd(&|d| {
                let mut lb2 = lb.clone();
                lb2[q] += d;
                probe_loss(&lb2, &bu, &x0, &w)
            });
            assert!((g - adj.grad_lambda_bar[q]).norm() < 1e-6, "λ̄[{q}]");
        }
        for i in [0, 5, 17, l * n * p - 1] {
            let g = fd(&|d| {
                let mut b2 = bu.clone();
                b2.data_mut()[i] += d;
                probe_loss(&lb, &b2, &x0, &w)
            });
            assert!((g - adj.grad_bu.data()[i]).norm() < 1e-6, "bu[{i}]");
        }
        for i in 0..n * p {
            let g = fd(&|d| {
                let mut x2 = x0.clone();
                x2.data_mut()[i] += d;
                probe_loss(&lb, &bu, &x2, &w)
            });
            assert!((g - adj.grad_x0.data()[i]).norm() < 1e-6, "x0[{i}]");
        }
    }

    fn discretize_loss(d: &DiagDynamics<f64>, wl: &[C], wb: &[C]) -> f64 {
        let disc = d.discretize();
        disc.lambda_bar.iter().zip(wl).map(|(x, w)| (w.conj() * x).re).sum::<f64>()
            + disc.b_bar.iter().zip(wb).map(|(x, w)| (w.conj() * x).re).sum::<f64>()
    }

    #[test]
    fn discretize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = DiagDynamics::<f64>::init(8, 2, 3, 1e-2, 0.5, 9).unwrap();
        let wl = rand_c(&mut rng, d.half());
        let wb = rand_c(&mut rng, d.b_tilde.len());
        let mut grad = d.clone();
        grad.lambda_log_neg_re.iter_mut().for_each(|x| *x = 0.0);
        grad.lambda_im.iter_mut().for_each(|x| *x = 0.0);
        grad.log_dt.iter_mut().for_each(|x| *x = 0.0);
        grad.b_tilde.iter_mut().for_each(|x| *x = C::new(0.0, 0.0));
        discretize_backward(&d, &wl, &wb, &mut grad);
        let eps = 1e-6;
        let central = |f: &dyn Fn(&mut DiagDynamics<f64>, f64)| {
            let mut a = d.clone();
            f(&mut a, eps);
            let mut b = d.clone();
            f(&mut b, -eps);
            (discretize_loss(&a, &wl, &wb) - discretize_loss(&b, &wl, &wb)) / (2.0 * eps)
        };
        for p in 0..d.half() {
            let g = central(&|m, e| m.lambda_log_neg_re[p] += e);
            assert!((g - grad.lambda_log_neg_re[p]).abs() < 1e-6 * (1.0 + g.abs()), "a[{p}]");
            let g = central(&|m, e| m.lambda_im[p] += e);
            assert!((g - grad.lambda_im[p]).abs() < 1e-6 * (1.0 + g.abs()), "b[{p}]");
            let g = central(&|m, e| m.log_dt[p] += e);
            assert!((g - grad.log_dt[p]).abs() < 1e-6 * (1.0 + g.abs()), "log_dt[{p}]");
        }
        for i in [0, 7, d.b_tilde.len() - 1] {
            let gr = central(&|m, e| m.b_tilde[i].re += e);
            let gi = central(&|m, e| m.b_tilde[i].im += e);
            assert!((C::new(gr, gi) - grad.b_tilde[i]).norm() < 1e-6, "b̃[{i}]");
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = AdamConfig { lr: 1.0, warmup_steps: 4, total_steps: 14, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 0.25);
        assert_eq!(cfg.lr_at(3), 1.0);
        assert_eq!(cfg.lr_at(4), 1.0);
        assert!((cfg.lr_at(9) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(14).abs() < 1e-12);
        assert!(cfg.lr_at(100).abs() < 1e-12);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut w = vec![1.0f64, -0.5, 0.3];
        let cfg = AdamConfig { lr: 1e-2, total_steps: 2000, ..Default::default() };
        let mut st = AdamState::new(3);
        for _ in 0..2000 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            adam_step(&mut w, &g, &mut st, &cfg, None);
        }
        let f: f64 = w.iter().map(|x| x * x).sum();
        assert!(f < 1e-6, "final loss {f}");
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut w = vec![1.0f64, 1.0];
        let mut st = AdamState::new(2);
        adam_step(&mut w, &[1.0, 1.0], &mut st, &AdamConfig::default(), Some(&[true, false]));
        assert_eq!(w[0], 1.0);
        assert!(w[1] < 1.0);
    }
}
