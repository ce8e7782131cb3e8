//! Continuous-time diagonal dynamics: HiPPO-normal initialization and
//! zero-order-hold discretization.
//!
//! Eigenvalues of the HiPPO-normal matrix come in conjugate pairs, so only
//! the half with positive imaginary part is stored. `p` always names the
//! full (mirrored) state size; every stored vector has `p / 2` rows.

use num_complex::{Complex, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::Container;
use crate::error::{invalid, Result};
use crate::numlin::{eig_hermitian, CMatrix};
use crate::scalar::Real;

pub const DEFAULT_DT_MIN: f64 = 1e-3;
pub const DEFAULT_DT_MAX: f64 = 1e-1;

/// Below this |λ| the input discretization uses its `Δ·b̃` limit.
pub const LAMBDA_EPS: f64 = 1e-12;

/// HiPPO-normal state matrix: `−½` on the diagonal and
/// `±√((n+½)(k+½))` off it, positive above and negative below, so that
/// `A + ½I` is skew-symmetric.
pub fn hippo_normal(p: usize) -> Result<Vec<f64>> {
    if p == 0 {
        return Err(invalid("state size must be at least 1"));
    }
    let mut a = vec![0.0; p * p];
    for n in 0..p {
        for k in 0..p {
            let mag = ((n as f64 + 0.5) * (k as f64 + 0.5)).sqrt();
            a[n * p + k] = match n.cmp(&k) {
                std::cmp::Ordering::Equal => -0.5,
                std::cmp::Ordering::Greater => -mag,
                std::cmp::Ordering::Less => mag,
            };
        }
    }
    Ok(a)
}

/// Eigenpairs of the HiPPO-normal matrix with `Im λ > 0`, ordered by
/// increasing frequency: `(λ, eigenvector)` with eigenvectors as columns of
/// a `p × p/2` row-major matrix.
pub fn hippo_eigen_half(p: usize) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    if p % 2 != 0 || p == 0 {
        return Err(invalid(format!("state size must be even and positive, got {p}")));
    }
    let a = hippo_normal(p)?;
    // A = −½I + S with S skew; −iS is Hermitian with S v = iω v.
    let h = CMatrix::from_fn(p, |i, j| {
        let s = a[i * p + j] + if i == j { 0.5 } else { 0.0 };
        Complex64::new(0.0, -s)
    });
    let eig = eig_hermitian(&h)?;
    let keep: Vec<usize> = (0..p).filter(|&i| eig.eigenvalues[i] > 0.0).collect();
    if keep.len() != p / 2 {
        return Err(invalid(format!(
            "expected {} positive frequencies, found {}",
            p / 2,
            keep.len()
        )));
    }
    let lambda = keep
        .iter()
        .map(|&i| Complex64::new(-0.5, eig.eigenvalues[i]))
        .collect();
    let v = &eig.eigenvectors;
    let mut vecs = vec![Complex64::new(0.0, 0.0); p * keep.len()];
    for r in 0..p {
        for (c, &i) in keep.iter().enumerate() {
            vecs[r * keep.len() + c] = v[(r, i)];
        }
    }
    Ok((lambda, vecs))
}

/// Continuous-time diagonal parameters for one layer.
///
/// `λ = −exp(lambda_log_neg_re) + i·lambda_im` keeps the real part negative
/// under any update of the stored parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagDynamics<T> {
    pub p: usize,
    pub u: usize,
    pub kb: usize,
    pub lambda_log_neg_re: Vec<T>,
    pub lambda_im: Vec<T>,
    /// `p/2 × u·kb²`, row-major.
    pub b_tilde: Vec<Complex<T>>,
    pub log_dt: Vec<T>,
    pub dt_min: f64,
    pub dt_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discretized<T> {
    pub lambda_bar: Vec<Complex<T>>,
    /// `p/2 × u·kb²`, row-major; reshapes to the input kernel `[p/2, u, kb, kb]`.
    pub b_bar: Vec<Complex<T>>,
}

impl<T: Real> DiagDynamics<T> {
    pub fn init(p: usize, u: usize, kb: usize, dt_min: f64, dt_max: f64, seed: u64) -> Result<Self> {
        if u == 0 {
            return Err(invalid("input size must be at least 1"));
        }
        if kb % 2 == 0 {
            return Err(invalid(format!("input kernel width must be odd, got {kb}")));
        }
        if !(dt_min > 0.0 && dt_min <= dt_max && dt_max.is_finite()) {
            return Err(invalid(format!("need 0 < dt_min <= dt_max, got [{dt_min}, {dt_max}]")));
        }
        let (lambda, v) = hippo_eigen_half(p)?;
        let half = p / 2;
        let cols = u * kb * kb;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (cols as f64).sqrt();
        let b_raw: Vec<f64> = (0..p * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        // b̃ = Vᴴ B_raw, restricted to the kept half of the spectrum
        let mut b_tilde = vec![Complex::new(T::zero(), T::zero()); half * cols];
        for r in 0..half {
            for c in 0..cols {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..p {
                    acc += v[k * half + r].conj() * b_raw[k * cols + c];
                }
                b_tilde[r * cols + c] = Complex::new(T::of(acc.re), T::of(acc.im));
            }
        }
        let (lo, hi) = (dt_min.ln(), dt_max.ln());
        let log_dt = (0..half)
            .map(|_| T::of(if hi > lo { rng.gen_range(lo..hi) } else { lo }))
            .collect();
        Ok(Self {
            p,
            u,
            kb,
            lambda_log_neg_re: lambda.iter().map(|l| T::of((-l.re).ln())).collect(),
            lambda_im: lambda.iter().map(|l| T::of(l.im)).collect(),
            b_tilde,
            log_dt,
            dt_min,
            dt_max,
        })
    }

    pub fn half(&self) -> usize {
        self.p / 2
    }

    pub fn cols(&self) -> usize {
        self.u * self.kb * self.kb
    }

    pub fn lambda(&self) -> Vec<Complex<T>> {
        self.lambda_log_neg_re
            .iter()
            .zip(&self.lambda_im)
            .map(|(&a, &b)| Complex::new(-a.exp(), b))
            .collect()
    }

    pub fn dt(&self) -> Vec<T> {
        self.log_dt.iter().map(|x| x.exp()).collect()
    }

    pub fn discretize(&self) -> Discretized<T> {
        discretize(&self.lambda(), &self.b_tilde, &self.dt())
    }

    pub fn to_container(&self, prefix: &str, c: &mut Container) {
        let half = self.half();
        c.push_complex(format!("{prefix}lambda"), &[half], &self.lambda());
        c.push_complex(format!("{prefix}b_tilde"), &[half, self.cols()], &self.b_tilde);
        c.push_real(format!("{prefix}log_dt"), &[half], &self.log_dt);
    }

    pub fn from_container(prefix: &str, c: &Container, u: usize, kb: usize, dt_min: f64, dt_max: f64) -> Result<Self> {
        let lambda: Vec<Complex<T>> = c.complex_vec(&format!("{prefix}lambda"))?;
        let b_tilde: Vec<Complex<T>> = c.complex_vec(&format!("{prefix}b_tilde"))?;
        let log_dt: Vec<T> = c.real_vec(&format!("{prefix}log_dt"))?;
        let half = lambda.len();
        if b_tilde.len() != half * u * kb * kb || log_dt.len() != half {
            return Err(invalid(format!("inconsistent dynamics sizes under {prefix:?}")));
        }
        if lambda.iter().any(|l| l.re >= T::zero()) {
            return Err(invalid("stored dynamics have Re λ >= 0"));
        }
        Ok(Self {
            p: 2 * half,
            u,
            kb,
            lambda_log_neg_re: lambda.iter().map(|l| (-l.re).ln()).collect(),
            lambda_im: lambda.iter().map(|l| l.im).collect(),
            b_tilde,
            log_dt,
            dt_min,
            dt_max,
        })
    }
}

/// `(e^z − 1)` accurate for small |z|.
pub fn expm1c<T: Real>(z: Complex<T>) -> Complex<T> {
    let half = T::of(0.5);
    let two = T::of(2.0);
    let (s, c) = z.im.sin_cos();
    let sh = (z.im * half).sin();
    Complex::new(z.re.exp_m1() * c - two * sh * sh, z.re.exp() * s)
}

/// ZOH factor `(e^{λΔ} − 1)/λ`, with its `Δ` limit near `λ = 0`.
pub fn zoh_factor<T: Real>(lambda: Complex<T>, dt: T) -> Complex<T> {
    if lambda.norm().as_f64() < LAMBDA_EPS {
        Complex::new(dt, T::zero())
    } else {
        expm1c(lambda * dt) / lambda
    }
}

/// Zero-order hold: `λ̄ = e^{λΔ}`, `b̄ = λ⁻¹(λ̄ − 1)·b̃` row-wise.
pub fn discretize<T: Real>(lambda: &[Complex<T>], b_tilde: &[Complex<T>], dt: &[T]) -> Discretized<T> {
    let rows = lambda.len();
    let cols = if rows == 0 { 0 } else { b_tilde.len() / rows };
    let lambda_bar = lambda.iter().zip(dt).map(|(&l, &d)| (l * d).exp()).collect();
    let mut b_bar = b_tilde.to_vec();
    for (r, row) in b_bar.chunks_mut(cols.max(1)).enumerate().take(rows) {
        let f = zoh_factor(lambda[r], dt[r]);
        for x in row {
            *x *= f;
        }
    }
    Discretized { lambda_bar, b_bar }
}
