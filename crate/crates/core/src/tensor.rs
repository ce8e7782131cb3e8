//! Dense row-major tensors and same-padded convolution primitives.
//!
//! Spatial tensors are channels-last, `[batch, H, W, F]`. Kernels are
//! `[F_out, F_in, k, k]` with `k` odd; every convolution is a
//! cross-correlation with symmetric zero padding so the output keeps the
//! input's spatial size.


use crate::error::{invalid, shape_err, Result};
use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret with a new shape holding the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn at(&self, idx: &[usize]) -> E {
        self.data[self.offset(idx)]
    }

    pub fn at_mut(&mut self, idx: &[usize]) -> &mut E {
        let o = self.offset(idx);
        &mut self.data[o]
    }

    pub fn map<F: Scalar>(&self, f: impl Fn(E) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    /// Max elementwise |a - b|; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).modulus())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|x| x.modulus()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sub-tensor at `i` along the leading axis.
    pub fn index0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Rows `range` of the leading axis.
    pub fn slice0(&self, start: usize, end: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.check_same(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Concatenate along the leading axis.
    pub fn concat0(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(shape_err("concat0", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }
}

/// Spatial dims of a channels-last tensor: (batch, H, W, F). Leading axes
/// beyond the last three are folded into batch.
pub fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(invalid(format!("spatial tensor needs rank >= 3, got {shape:?}")));
    }
    let r = shape.len();
    let batch = shape[..r - 3].iter().product();
    Ok((batch, shape[r - 3], shape[r - 2], shape[r - 1]))
}

/// A square, odd-width convolution kernel `[F_out, F_in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<E> {
    tensor: Tensor<E>,
}

impl<E: Scalar> ConvKernel<E> {
    pub fn new(tensor: Tensor<E>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 {
            return Err(invalid(format!("kernel must be rank 4, got {s:?}")));
        }
        if s[2] != s[3] {
            return Err(invalid(format!("kernel must be square, got {s:?}")));
        }
        if s[2] % 2 == 0 {
            return Err(invalid(format!("kernel width must be odd, got {s:?}")));
        }
        Ok(Self { tensor })
    }

    pub fn from_vec(f_out: usize, f_in: usize, k: usize, data: Vec<E>) -> Result<Self> {
        Self::new(Tensor::new(vec![f_out, f_in, k, k], data)?)
    }

    pub fn zeros(f_out: usize, f_in: usize, k: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[f_out, f_in, k, k]))
    }

    /// Centered delta on the channel identity: the neutral element of
    /// composition.
    pub fn identity(features: usize, k: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[features, features, k, k]);
        for f in 0..features {
            *t.at_mut(&[f, f, k / 2, k / 2]) = E::one();
        }
        Self::new(t)
    }

    pub fn f_out(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn f_in(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn radius(&self) -> usize {
        self.width() / 2
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.tensor
    }

    pub fn data(&self) -> &[E] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        self.tensor.data_mut()
    }

    pub fn into_tensor(self) -> Tensor<E> {
        self.tensor
    }
}

/// Gather each pixel's `k×k` neighbourhood into a column.
///
/// Output is `[.., H, W, F·k²]` with column index `v = q·k² + m·k + n` for
/// input channel `q`, kernel row `m` and kernel column `n`. Out-of-range
/// taps read zero.
pub fn im2col<E: Scalar>(input: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
    if k % 2 == 0 {
        return Err(invalid(format!("im2col width must be odd, got {k}")));
    }
    let (batch, h, w, f) = spatial_dims(input.shape())?;
    let mut shape = input.shape().to_vec();
    let last = shape.len() - 1;
    shape[last] = f * k * k;
    if k == 1 {
        return input.clone().reshape(&shape);
    }
    let cols = f * k * k;
    let r = k / 2;
    let src = input.data();
    let mut out = vec![E::zero(); batch * h * w * cols];
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let col = &mut out[((b * h + i) * w + j) * cols..][..cols];
                for m in 0..k {
                    let ii = i + m;
                    if ii < r || ii - r >= h {
                        continue;
                    }
                    for n in 0..k {
                        let jj = j + n;
                        if jj < r || jj - r >= w {
                            continue;
                        }
                        let px = &src[((b * h + ii - r) * w + jj - r) * f..][..f];
                        for (q, &x) in px.iter().enumerate() {
                            col[q * k * k + m * k + n] = x;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the image.
pub fn col2im<E: Scalar>(cols: &Tensor<E>, k: usize, features: usize) -> Result<Tensor<E>> {
    let (batch, h, w, c) = spatial_dims(cols.shape())?;
    if c != features * k * k {
        return Err(shape_err("col2im", cols.shape(), &[batch, h, w, features * k * k]));
    }
    let mut shape = cols.shape().to_vec();
    let last = shape.len() - 1;
    shape[last] = features;
    if k == 1 {
        return cols.clone().reshape(&shape);
    }
    let r = k / 2;
    let src = cols.data();
    let mut out = vec![E::zero(); batch * h * w * features];
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let col = &src[((b * h + i) * w + j) * c..][..c];
                for m in 0..k {
                    let ii = i + m;
                    if ii < r || ii - r >= h {
                        continue;
                    }
                    for n in 0..k {
                        let jj = j + n;
                        if jj < r || jj - r >= w {
                            continue;
                        }
                        let px = &mut out[((b * h + ii - r) * w + jj - r) * features..][..features];
                        for (q, y) in px.iter_mut().enumerate() {
                            *y += col[q * k * k + m * k + n];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Tap-major neighbourhood gather used by the convolution routines:
/// column index `v = (m·k + n)·F + q`, so each tap copies one contiguous
/// run of channels. Same values as [`im2col`], permuted within a column.
pub fn conv_cols<E: Scalar>(input: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
    if k % 2 == 0 {
        return Err(invalid(format!("convolution width must be odd, got {k}")));
    }
    let (batch, h, w, f) = spatial_dims(input.shape())?;
    let mut shape = input.shape().to_vec();
    let last = shape.len() - 1;
    shape[last] = f * k * k;
    if k == 1 {
        return input.clone().reshape(&shape);
    }
    let cols = f * k * k;
    let r = k / 2;
    let src = input.data();
    let mut out = vec![E::zero(); batch * h * w * cols];
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let col = &mut out[((b * h + i) * w + j) * cols..][..cols];
                // kernel columns n whose source column j + n − r is in range
                let n_lo = r.saturating_sub(j);
                let n_hi = (w + r - j).min(k);
                for m in 0..k {
                    let ii = i + m;
                    if ii < r || ii - r >= h {
                        continue;
                    }
                    let row = (b * h + ii - r) * w;
                    let s0 = (row + j + n_lo - r) * f;
                    let len = (n_hi - n_lo) * f;
                    col[(m * k + n_lo) * f..][..len].copy_from_slice(&src[s0..s0 + len]);
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Adjoint of [`conv_cols`].
pub fn conv_cols_adjoint<E: Scalar>(cols: &Tensor<E>, k: usize, features: usize) -> Result<Tensor<E>> {
    let (batch, h, w, c) = spatial_dims(cols.shape())?;
    if c != features * k * k {
        return Err(shape_err("conv_cols_adjoint", cols.shape(), &[batch, h, w, features * k * k]));
    }
    let mut shape = cols.shape().to_vec();
    let last = shape.len() - 1;
    shape[last] = features;
    if k == 1 {
        return cols.clone().reshape(&shape);
    }
    let f = features;
    let r = k / 2;
    let src = cols.data();
    let mut out = vec![E::zero(); batch * h * w * f];
    for b in 0..batch {
        for i in 0..h {
            for j in 0..w {
                let col = &src[((b * h + i) * w + j) * c..][..c];
                let n_lo = r.saturating_sub(j);
                let n_hi = (w + r - j).min(k);
                for m in 0..k {
                    let ii = i + m;
                    if ii < r || ii - r >= h {
                        continue;
                    }
                    let row = (b * h + ii - r) * w;
                    let d0 = (row + j + n_lo - r) * f;
                    let len = (n_hi - n_lo) * f;
                    for (y, &x) in out[d0..d0 + len].iter_mut().zip(&col[(m * k + n_lo) * f..][..len]) {
                        *y += x;
                    }
                }
            }
        }
    }
    Tensor::new(shape, out)
}

impl<E: Scalar> ConvKernel<E> {
    /// Kernel rows in [`conv_cols`] order: `[F_out, k, k, F_in]`.
    pub fn tap_major(&self) -> Vec<E> {
        let (fo, fi, k) = (self.f_out(), self.f_in(), self.width());
        let kk = k * k;
        let src = self.data();
        let mut out = vec![E::zero(); src.len()];
        for o in 0..fo {
            for q in 0..fi {
                for t in 0..kk {
                    out[(o * kk + t) * fi + q] = src[(o * fi + q) * kk + t];
                }
            }
        }
        out
    }

    /// Inverse of [`ConvKernel::tap_major`].
    pub fn from_tap_major(f_out: usize, f_in: usize, k: usize, taps: &[E]) -> Result<Self> {
        let kk = k * k;
        if taps.len() != f_out * f_in * kk {
            return Err(shape_err("kernel taps", &[taps.len()], &[f_out, k, k, f_in]));
        }
        let mut out = vec![E::zero(); taps.len()];
        for o in 0..f_out {
            for t in 0..kk {
                for q in 0..f_in {
                    out[(o * f_in + q) * kk + t] = taps[(o * kk + t) * f_in + q];
                }
            }
        }
        Self::from_vec(f_out, f_in, k, out)
    }
}

/// Rows per task below which splitting a product across workers does not pay.
const MIN_ROWS_PER_WORKER: usize = 256;

/// `c[m×n] = a[m×k] · B`, with `a` and `c` row-major and `B` addressed by
/// strides, splitting the rows of `a` across `workers` threads. Each row is
/// computed exactly as in the single-threaded product.
#[allow(clippy::too_many_arguments)]
pub fn gemm_rows<E: Scalar>(workers: usize, m: usize, k: usize, n: usize, a: &[E], b: &[E], rsb: usize, csb: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    if n == 0 || m == 0 {
        return c;
    }
    if workers <= 1 || m < 2 * MIN_ROWS_PER_WORKER {
        E::gemm(m, k, n, E::one(), a, k, 1, b, rsb, csb, E::zero(), &mut c, n, 1);
        return c;
    }
    let rows = m.div_ceil(workers).max(MIN_ROWS_PER_WORKER);
    crate::scan::pool(workers).install(|| {
        c.par_chunks_mut(rows * n).zip(a.par_chunks(rows * k.max(1))).for_each(|(cc, aa)| {
            let mm = cc.len() / n;
            E::gemm(mm, k, n, E::one(), aa, k, 1, b, rsb, csb, E::zero(), cc, n, 1);
        })
    });
    c
}

/// Same-padded 2-D convolution of a channels-last tensor.
pub fn conv2d<E: Scalar>(kernel: &ConvKernel<E>, input: &Tensor<E>) -> Result<Tensor<E>> {
    let (_, _, _, f) = spatial_dims(input.shape())?;
    if f != kernel.f_in() {
        return Err(shape_err("conv2d", kernel.tensor().shape(), input.shape()));
    }
    let cols = conv_cols(input, kernel.width())?;
    conv2d_cols(kernel, &cols)
}

/// [`conv2d`] on a precomputed [`conv_cols`] tensor.
pub fn conv2d_cols<E: Scalar>(kernel: &ConvKernel<E>, cols: &Tensor<E>) -> Result<Tensor<E>> {
    conv2d_cols_with(kernel, cols, 1)
}

/// [`conv2d_cols`] with the pixel rows split across `workers` threads.
pub fn conv2d_cols_with<E: Scalar>(kernel: &ConvKernel<E>, cols: &Tensor<E>, workers: usize) -> Result<Tensor<E>> {
    let (batch, h, w, c) = spatial_dims(cols.shape())?;
    let kdim = kernel.f_in() * kernel.width() * kernel.width();
    if c != kdim {
        return Err(shape_err("conv2d", kernel.tensor().shape(), cols.shape()));
    }
    let n = batch * h * w;
    let out = gemm_rows(workers, n, kdim, kernel.f_out(), cols.data(), &kernel.tap_major(), 1, kdim);
    let mut shape = cols.shape().to_vec();
    let last = shape.len() - 1;
    shape[last] = kernel.f_out();
    Tensor::new(shape, out)
}

fn conj_cow<E: Scalar>(v: &[E]) -> std::borrow::Cow<'_, [E]> {
    if E::COMPLEX {
        v.iter().map(|x| x.conj()).collect::<Vec<_>>().into()
    } else {
        v.into()
    }
}

/// Gradients of a real-valued loss through `y = conv2d(kernel, x)`, given
/// `cols = conv_cols(x)` and `dL/dy`. Returns `(dL/dx, dL/dkernel)`.
///
/// For complex elements the returned values are the conjugate-linear
/// adjoints (`∂L/∂Re + i·∂L/∂Im`).
pub fn conv2d_backward<E: Scalar>(
    kernel: &ConvKernel<E>,
    cols: &Tensor<E>,
    grad_out: &Tensor<E>,
    need_input: bool,
) -> Result<(Option<Tensor<E>>, ConvKernel<E>)> {
    let (batch, h, w, c) = spatial_dims(cols.shape())?;
    let (gb, gh, gw, gf) = spatial_dims(grad_out.shape())?;
    let k = kernel.width();
    let kdim = kernel.f_in() * k * k;
    if c != kdim || (gb, gh, gw, gf) != (batch, h, w, kernel.f_out()) {
        return Err(shape_err("conv2d_backward", cols.shape(), grad_out.shape()));
    }
    let n = batch * h * w;
    let f_out = kernel.f_out();

    // dK[o, v] = Σ_n g[n, o] · conj(cols[n, v])
    let cols_c = conj_cow(cols.data());
    let mut gk = vec![E::zero(); f_out * kdim];
    E::gemm(f_out, n, kdim, E::one(), grad_out.data(), 1, f_out, &cols_c, kdim, 1, E::zero(), &mut gk, kdim, 1);
    let grad_kernel = ConvKernel::from_tap_major(f_out, kernel.f_in(), k, &gk)?;

    let grad_input = if need_input {
        // dcols[n, v] = Σ_o g[n, o] · conj(K[o, v])
        let kc = conj_cow(&kernel.tap_major()).into_owned();
        let mut gc = vec![E::zero(); n * kdim];
        E::gemm(n, f_out, kdim, E::one(), grad_out.data(), f_out, 1, &kc, kdim, 1, E::zero(), &mut gc, kdim, 1);
        let gcols = Tensor::new(cols.shape().to_vec(), gc)?;
        Some(conv_cols_adjoint(&gcols, k, kernel.f_in())?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}

/// Compose two kernels so that `conv(compose(k1, k2), x) == conv(k2, conv(k1, x))`
/// away from the borders. The result has width `k1 + k2 − 1`.
pub fn kernel_compose<E: Scalar>(k1: &ConvKernel<E>, k2: &ConvKernel<E>) -> Result<ConvKernel<E>> {
    if k1.f_out() != k2.f_in() {
        return Err(shape_err("kernel_compose", k1.tensor().shape(), k2.tensor().shape()));
    }
    let (w1, w2) = (k1.width(), k2.width());
    let w = w1 + w2 - 1;
    let (fo, mid, fi) = (k2.f_out(), k2.f_in(), k1.f_in());
    let mut out = Tensor::zeros(&[fo, fi, w, w]);
    let a = k1.data();
    let b = k2.data();
    let od = out.data_mut();
    for o in 0..fo {
        for p in 0..mid {
            for m2 in 0..w2 {
                for n2 in 0..w2 {
                    let bv = b[((o * mid + p) * w2 + m2) * w2 + n2];
                    if bv == E::zero() {
                        continue;
                    }
                    for q in 0..fi {
                        for m1 in 0..w1 {
                            let row = ((o * fi + q) * w + m1 + m2) * w;
                            for n1 in 0..w1 {
                                od[row + n1 + n2] += bv * a[((p * fi + q) * w1 + m1) * w1 + n1];
                            }
                        }
                    }
                }
            }
        }
    }
    ConvKernel::new(out)
}

/// Per-pixel channel map `y = M x` as a 1×1 kernel.
pub fn pointwise<E: Scalar>(matrix: &[E], f_out: usize, f_in: usize) -> Result<ConvKernel<E>> {
    ConvKernel::from_vec(f_out, f_in, 1, matrix.to_vec())
}

pub fn ones<E: Scalar>(n: usize) -> Vec<E> {
    vec![E::one(); n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_k(fo: usize, fi: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvKernel<f64> {
        ConvKernel::new(rand_t(&[fo, fi, k, k], rng)).unwrap()
    }

    /// Six nested loops, straight from the definition.
    fn conv_loops(k: &ConvKernel<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let s = x.shape();
        let (b, h, w, fi) = (s[0], s[1], s[2], s[3]);
        let (fo, kw) = (k.f_out(), k.width());
        let r = (kw / 2) as isize;
        let mut y = Tensor::zeros(&[b, h, w, fo]);
        for bb in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for o in 0..fo {
                        let mut acc = 0.0;
                        for q in 0..fi {
                            for m in 0..kw {
                                for n in 0..kw {
                                    let ii = i as isize + m as isize - r;
                                    let jj = j as isize + n as isize - r;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                        continue;
                                    }
                                    acc += k.tensor().at(&[o, q, m, n])
                                        * x.at(&[bb, ii as usize, jj as usize, q]);
                                }
                            }
                        }
                        *y.at_mut(&[bb, i, j, o]) = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn identity_kernel_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&[2, 4, 3, 5], &mut rng);
        let k = ConvKernel::identity(5, 1).unwrap();
        assert_eq!(conv2d(&k, &x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let c = 0.7f64;
        let x = Tensor::from_fn(&[1, 5, 5, 1], |_| c);
        let k = ConvKernel::from_vec(1, 1, 3, vec![1.0; 9]).unwrap();
        let y = conv2d(&k, &x).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                assert!((y.at(&[0, i, j, 0]) - 9.0 * c).abs() < 1e-12);
            }
        }
        // corners see four taps
        assert!((y.at(&[0, 0, 0, 0]) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(fo, fi, k) in &[(1, 1, 3), (3, 2, 3), (2, 4, 5), (4, 3, 1)] {
            let x = rand_t(&[2, 5, 5, fi], &mut rng);
            let ker = rand_k(fo, fi, k, &mut rng);
            let err = conv2d(&ker, &x).unwrap().max_abs_diff(&conv_loops(&ker, &x));
            assert!(err < 1e-12, "{err}");
        }
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3, 2]);
        let k = ConvKernel::<f64>::zeros(1, 3, 3).unwrap();
        let msg = conv2d(&k, &x).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 3, 3]") && msg.contains("[1, 3, 3, 2]"), "{msg}");
    }

    #[test]
    fn rejects_even_or_non_square_kernels() {
        assert!(ConvKernel::<f64>::zeros(1, 1, 2).is_err());
        assert!(ConvKernel::new(Tensor::<f64>::zeros(&[1, 1, 3, 1])).is_err());
    }

    #[test]
    fn conv_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_t(&[1, 6, 6, 3], &mut rng);
        let y = rand_t(&[1, 6, 6, 3], &mut rng);
        let k = rand_k(2, 3, 3, &mut rng);
        let (a, b) = (0.3, -1.7);
        let lhs = conv2d(&k, &x.scale(a).add(&y.scale(b)).unwrap()).unwrap();
        let rhs = conv2d(&k, &x).unwrap().scale(a).add(&conv2d(&k, &y).unwrap().scale(b)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-10 * lhs.max_abs().max(1.0));
    }

    #[test]
    fn compose_width_and_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k1 = rand_k(2, 2, 3, &mut rng);
        let k2 = rand_k(2, 2, 3, &mut rng);
        assert_eq!(kernel_compose(&k1, &k2).unwrap().width(), 5);
        let d = ConvKernel::<f64>::identity(2, 3).unwrap();
        let dd = kernel_compose(&d, &d).unwrap();
        assert_eq!(dd, ConvKernel::identity(2, 5).unwrap());
    }

    #[test]
    fn compose_pointwise_is_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 4;
        let k1 = rand_k(p, p, 1, &mut rng);
        let k2 = rand_k(p, p, 1, &mut rng);
        let c = kernel_compose(&k1, &k2).unwrap();
        for o in 0..p {
            for q in 0..p {
                let mm: f64 = (0..p).map(|r| k2.data()[o * p + r] * k1.data()[r * p + q]).sum();
                assert!((c.data()[o * p + q] - mm).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn compose_matches_sequential_conv_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k1 = rand_k(3, 2, 3, &mut rng);
        let k2 = rand_k(2, 3, 3, &mut rng);
        let x = rand_t(&[1, 9, 9, 2], &mut rng);
        let lhs = conv2d(&kernel_compose(&k1, &k2).unwrap(), &x).unwrap();
        let rhs = conv2d(&k2, &conv2d(&k1, &x).unwrap()).unwrap();
        for i in 2..7 {
            for j in 2..7 {
                for o in 0..2 {
                    assert!((lhs.at(&[0, i, j, o]) - rhs.at(&[0, i, j, o])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k1 = rand_k(2, 3, 3, &mut rng);
        let k2 = rand_k(4, 2, 1, &mut rng);
        let k3 = rand_k(2, 4, 5, &mut rng);
        let a = kernel_compose(&kernel_compose(&k1, &k2).unwrap(), &k3).unwrap();
        let b = kernel_compose(&k1, &kernel_compose(&k2, &k3).unwrap()).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-10 * a.tensor().max_abs());
    }

    #[test]
    fn im2col_width_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_t(&[2, 3, 3, 4], &mut rng);
        assert_eq!(im2col(&x, 1).unwrap(), x);
    }

    #[test]
    fn im2col_borders_are_zero() {
        let x = Tensor::from_vec_2x2();
        let c = im2col(&x, 3).unwrap();
        assert_eq!(c.shape(), &[1, 2, 2, 9]);
        // pixel (0,0): taps with m=0 or n=0 fall outside
        let col: Vec<f64> = (0..9).map(|v| c.at(&[0, 0, 0, v])).collect();
        assert_eq!(col, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 3.0, 4.0]);
    }

    impl Tensor<f64> {
        fn from_vec_2x2() -> Self {
            Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
        }
    }

    #[test]
    fn im2col_matmul_equals_conv_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (u, p, k) = (3, 4, 3);
        let x = rand_t(&[2, 5, 4, u], &mut rng);
        let ker = rand_k(p, u, k, &mut rng);
        let cols = im2col(&x, k).unwrap();
        let y = conv2d(&ker, &x).unwrap();
        let kd = u * k * k;
        for b in 0..2 {
            for i in 0..5 {
                for j in 0..4 {
                    for o in 0..p {
                        let v: f64 = (0..kd).map(|v| ker.data()[o * kd + v] * cols.at(&[b, i, j, v])).sum();
                        assert!((v - y.at(&[b, i, j, o])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_t(&[1, 4, 5, 2], &mut rng);
        let c = rand_t(&[1, 4, 5, 18], &mut rng);
        let lhs: f64 = im2col(&x, 3).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = col2im(&c, 3, 2).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn complex_conv_matches_split_real_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let kr = rand_k(2, 3, 3, &mut rng);
        let ki = rand_k(2, 3, 3, &mut rng);
        let x = rand_t(&[1, 4, 4, 3], &mut rng);
        let kc = ConvKernel::from_vec(
            2,
            3,
            3,
            kr.data().iter().zip(ki.data()).map(|(&a, &b)| Complex64::new(a, b)).collect(),
        )
        .unwrap();
        let y = conv2d(&kc, &x.map(|v| Complex64::new(v, 0.0))).unwrap();
        let yr = conv2d(&kr, &x).unwrap();
        let yi = conv2d(&ki, &x).unwrap();
        for (n, z) in y.data().iter().enumerate() {
            assert!((z.re - yr.data()[n]).abs() < 1e-12 && (z.im - yi.data()[n]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_t(&[2, 4, 4, 2], &mut rng);
        let k = rand_k(3, 2, 3, &mut rng);
        let g = rand_t(&[2, 4, 4, 3], &mut rng);
        let cols = conv_cols(&x, 3).unwrap();
        let (gx, gk) = conv2d_backward(&k, &cols, &g, true).unwrap();
        let gx = gx.unwrap();
        let loss = |k: &ConvKernel<f64>, x: &Tensor<f64>| -> f64 {
            conv2d(k, x).unwrap().data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for idx in [0, 7, 20, 31] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&k, &xp) - loss(&k, &xm)) / (2.0 * eps);
            assert!((fd - gx.data()[idx]).abs() < 1e-8);
        }
        for idx in [0, 13, 53] {
            let mut kp = k.clone();
            kp.data_mut()[idx] += eps;
            let mut km = k.clone();
            km.data_mut()[idx] -= eps;
            let fd = (loss(&kp, &x) - loss(&km, &x)) / (2.0 * eps);
            assert!((fd - gk.data()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_cols_is_a_permutation_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (f, k) = (3, 5);
        let x = rand_t(&[2, 4, 6, f], &mut rng);
        let a = im2col(&x, k).unwrap();
        let b = conv_cols(&x, k).unwrap();
        let c = f * k * k;
        for px in 0..2 * 4 * 6 {
            for q in 0..f {
                for t in 0..k * k {
                    assert_eq!(a.data()[px * c + q * k * k + t], b.data()[px * c + t * f + q]);
                }
            }
        }
    }

    #[test]
    fn conv_cols_adjoint_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_t(&[2, 3, 5, 2], &mut rng);
        let c = rand_t(&[2, 3, 5, 18], &mut rng);
        let lhs: f64 = conv_cols(&x, 3).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = conv_cols_adjoint(&c, 3, 2).unwrap().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn row_split_product_is_bitwise_identical() {
        let (m, k, n) = (1500, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64 - 50.0) / 7.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 17) as f64 - 8.0) / 3.0).collect();
        let one = gemm_rows(1, m, k, n, &a, &b, n, 1);
        for w in [2, 3, 8] {
            assert_eq!(gemm_rows(w, m, k, n, &a, &b, n, 1), one);
        }
        // transposed operand via strides
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        assert_eq!(gemm_rows(4, m, k, n, &a, &bt, 1, k), one);
    }

    #[test]
    fn tap_major_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let k = rand_k(3, 2, 3, &mut rng);
        let back = ConvKernel::from_tap_major(3, 2, 3, &k.tap_major()).unwrap();
        assert_eq!(back, k);
    }
}
