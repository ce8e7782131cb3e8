//! Executable equivalence checks: the parallel scan against the literal
//! recurrence, associativity of the scan operator, the convolutional
//! recurrence against per-pixel state space recurrences over im2col
//! columns, and the vanilla ConvRNN step.

use num_complex::Complex;
use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::{Real, Scalar};
use crate::scan::{combine, scan_parallel_general, scan_parallel_with, scan_sequential, ScanElement, ScanOptions, StateOp};
use crate::tensor::{conv2d, im2col, ConvKernel, Tensor};

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EquivalenceReport {
    pub check: String,
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
    pub shapes: Vec<String>,
    pub tolerance: f64,
    pub pass: bool,
    pub samples: usize,
}

impl EquivalenceReport {
    pub fn new(check: impl Into<String>, tolerance: f64) -> Self {
        Self {
            check: check.into(),
            max_abs_err: 0.0,
            mean_abs_err: 0.0,
            shapes: Vec::new(),
            tolerance,
            pass: true,
            samples: 0,
        }
    }

    /// Fold one comparison's errors (max, sum, count) into the report.
    pub fn record(&mut self, max: f64, sum: f64, count: usize) {
        let total = self.mean_abs_err * self.samples as f64 + sum;
        self.samples += count;
        self.mean_abs_err = if self.samples == 0 { 0.0 } else { total / self.samples as f64 };
        if max > self.max_abs_err || max.is_nan() {
            self.max_abs_err = max;
        }
        self.pass = self.max_abs_err < self.tolerance;
    }

    pub fn merge(&mut self, other: &EquivalenceReport) {
        self.record(other.max_abs_err, other.mean_abs_err * other.samples as f64, other.samples);
        self.shapes.extend(other.shapes.iter().cloned());
    }
}

/// Default tolerance by precision: reordered sums in the parallel paths
/// differ from the sequential ones at the rounding level.
pub fn tolerance_for<T: Real>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-5
    } else {
        1e-10
    }
}

/// `(max, sum, count)` of |a − b| over entries, optionally restricted to
/// pixels at least `margin` away from the border of a `[..., H, W, C]` field.
pub fn field_error<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, margin: usize) -> Result<(f64, f64, usize)> {
    if a.shape() != b.shape() {
        return Err(shape_err("error comparison", a.shape(), b.shape()));
    }
    let r = a.rank();
    if r < 3 {
        return Err(invalid("field comparison needs [..., H, W, C]"));
    }
    let (h, w, c) = (a.shape()[r - 3], a.shape()[r - 2], a.shape()[r - 1]);
    let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let pix = i / c;
        let (row, col) = ((pix / w) % h, pix % w);
        if row < margin || col < margin || row + margin >= h || col + margin >= w {
            continue;
        }
        let e = (*x - *y).modulus();
        if e.is_nan() {
            max = f64::NAN;
        } else if !max.is_nan() {
            max = max.max(e);
        }
        sum += e;
        n += 1;
    }
    Ok((max, sum, n))
}

fn state_radius<T: Real>(op: &StateOp<T>) -> usize {
    (op.width() - 1) / 2
}

/// Error between `(q1⊛q2)⊛q3` and `q1⊛(q2⊛q3)` over the effective inputs
/// (restricted to `margin`-interior pixels) and the composed operators.
pub fn associativity_error<T: Real>(
    q1: &ScanElement<T>,
    q2: &ScanElement<T>,
    q3: &ScanElement<T>,
    margin: usize,
) -> Result<(f64, f64, usize)> {
    let left = combine(&combine(q1, q2)?, q3)?;
    let right = combine(q1, &combine(q2, q3)?)?;
    let (mut max, mut sum, mut n) = field_error(&left.bu, &right.bu, margin)?;
    let (la, ra): (Vec<Complex<T>>, Vec<Complex<T>>) = match (&left.a, &right.a) {
        (StateOp::Diag(a), StateOp::Diag(b)) => (a.clone(), b.clone()),
        (StateOp::Kernel(a), StateOp::Kernel(b)) => (a.data().to_vec(), b.data().to_vec()),
        _ => return Err(invalid("mixed operator variants")),
    };
    for (x, y) in la.iter().zip(&ra) {
        let e = (*x - *y).modulus();
        max = max.max(e);
        sum += e;
        n += 1;
    }
    Ok((max, sum, n))
}

/// Associativity on consecutive triples of `elements`, then the full
/// parallel scan against [`scan_sequential`].
///
/// Diagonal elements are compared everywhere. Full kernels are compared on
/// pixels farther from the border than the summed kernel radii, where
/// zero-padded composition is exact.
pub fn check_prop1<T: Real>(elements: &[ScanElement<T>], x0: &Tensor<Complex<T>>, opts: &ScanOptions) -> Result<EquivalenceReport> {
    let first = elements.first().ok_or_else(|| invalid("check needs at least one element"))?;
    let general = matches!(first.a, StateOp::Kernel(_));
    let tol = if general { 1e-8f64.max(tolerance_for::<T>()) } else { tolerance_for::<T>() };
    let mut report = EquivalenceReport::new(if general { "prop1.general" } else { "prop1.diag" }, tol);
    report.shapes.push(format!("L={} field={:?}", elements.len(), first.bu.shape()));
    for t in elements.windows(3) {
        let margin: usize = t.iter().map(|e| state_radius(&e.a)).sum();
        let (m, s, n) = associativity_error(&t[0], &t[1], &t[2], margin)?;
        report.record(m, s, n);
    }
    let sequential = scan_sequential(elements, x0)?;
    let (parallel, margin) = if general {
        let grown: usize = elements.iter().map(|e| e.a.width() - 1).sum::<usize>() + 1;
        let (p, _) = scan_parallel_general(elements, x0, grown)?;
        (p, elements.iter().map(|e| state_radius(&e.a)).sum::<usize>())
    } else {
        (scan_parallel_with(elements, x0, opts)?.0, 0)
    };
    let (m, s, n) = field_error(&sequential, &parallel, margin)?;
    report.record(m, s, n);
    Ok(report)
}

/// Run the convolutional recurrence `x_k = A ∗ x_{k−1} + B ∗ u_k` with a
/// pointwise `A` two ways: as field convolutions, and as independent
/// per-pixel recurrences `x = A_SSM·x + B_SSM·im2col(u_k)` where `B_SSM` is
/// `B` flattened to `P × U·kB²`.
pub fn check_prop3<T: Real>(
    a_kernel: &ConvKernel<Complex<T>>,
    b_kernel: &ConvKernel<Complex<T>>,
    u: &Tensor<Complex<T>>,
    x0: &Tensor<Complex<T>>,
) -> Result<EquivalenceReport> {
    check_prop3_split(a_kernel, a_kernel, b_kernel, u, x0)
}

/// As [`check_prop3`], but the per-pixel side uses `a_pixel` as its state
/// matrix; differing matrices let the harness confirm the check can fail.
pub fn check_prop3_split<T: Real>(
    a_kernel: &ConvKernel<Complex<T>>,
    a_pixel: &ConvKernel<Complex<T>>,
    b_kernel: &ConvKernel<Complex<T>>,
    u: &Tensor<Complex<T>>,
    x0: &Tensor<Complex<T>>,
) -> Result<EquivalenceReport> {
    let dims = |k: &ConvKernel<Complex<T>>| [k.f_out(), k.f_in(), k.width()];
    if dims(a_pixel) != dims(a_kernel) {
        return Err(shape_err("prop3 pixel state matrix", &dims(a_pixel), &dims(a_kernel)));
    }
    if a_kernel.width() != 1 {
        return Err(Error::Refused(format!(
            "per-pixel equivalence needs a pointwise state kernel, got width {}",
            a_kernel.width()
        )));
    }
    let p = a_kernel.f_out();
    if a_kernel.f_in() != p || b_kernel.f_out() != p {
        return Err(shape_err("prop3 kernels", &[p, a_kernel.f_in()], &[b_kernel.f_out(), b_kernel.f_in()]));
    }
    let s = u.shape().to_vec();
    if s.len() != 5 || s[4] != b_kernel.f_in() {
        return Err(shape_err("prop3 input", &s, &[0, 0, 0, 0, b_kernel.f_in()]));
    }
    let (l, b, h, w) = (s[0], s[1], s[2], s[3]);
    if x0.shape() != [b, h, w, p] {
        return Err(shape_err("prop3 x0", x0.shape(), &[b, h, w, p]));
    }
    let kb = b_kernel.width();
    let cols_n = b_kernel.f_in() * kb * kb;

    // (a) field convolutions, one step at a time
    let mut x = x0.clone();
    let mut conv_states = Vec::with_capacity(l);
    for k in 0..l {
        let mut next = conv2d(a_kernel, &x)?;
        next.add_assign(&conv2d(b_kernel, &u.index0(k))?)?;
        conv_states.push(next.clone());
        x = next;
    }
    let conv_states = Tensor::stack(&conv_states)?;

    // (b) per-pixel vector recurrences over im2col columns
    let a_ssm = a_pixel.data();
    let b_ssm = b_kernel.data();
    let zero = Complex::new(T::zero(), T::zero());
    let mut pix_states = vec![zero; l * b * h * w * p];
    let mut state = x0.data().to_vec();
    for k in 0..l {
        let cols = im2col(&u.index0(k), kb)?;
        let mut next = vec![zero; state.len()];
        for px in 0..b * h * w {
            let xs = &state[px * p..(px + 1) * p];
            let col = &cols.data()[px * cols_n..(px + 1) * cols_n];
            for r in 0..p {
                let mut acc = zero;
                for c in 0..p {
                    acc += a_ssm[r * p + c] * xs[c];
                }
                for v in 0..cols_n {
                    acc += b_ssm[r * cols_n + v] * col[v];
                }
                next[px * p + r] = acc;
            }
        }
        pix_states[k * next.len()..(k + 1) * next.len()].copy_from_slice(&next);
        state = next;
    }
    let pix_states = Tensor::new(conv_states.shape().to_vec(), pix_states)?;
    let mut report = EquivalenceReport::new("prop3", tolerance_for::<T>());
    report.shapes.push(format!("L={l} B={b} H={h} W={w} P={p} U={} kB={kb}", b_kernel.f_in()));
    let (m, s, n) = field_error(&conv_states, &pix_states, 0)?;
    report.record(m, s, n);
    Ok(report)
}

/// One vanilla ConvRNN step `tanh(A ∗ x_prev + B ∗ u_k)`.
pub fn convrnn_step<T: Real>(
    a_kernel: &ConvKernel<T>,
    b_kernel: &ConvKernel<T>,
    x_prev: &Tensor<T>,
    u_k: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut z = conv2d(a_kernel, x_prev)?;
    z.add_assign(&conv2d(b_kernel, u_k)?)?;
    Ok(z.map(|v| v.tanh()))
}
