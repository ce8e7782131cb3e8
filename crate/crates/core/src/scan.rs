//! Associative scans over linear convolutional recurrences
//! `x_k = A_k ∗ x_{k−1} + (B∗u)_k`.
//!
//! Scan elements pair a state operator with an effective input. Two
//! operator variants exist: a full complex kernel, whose width grows under
//! composition, and a diagonal (channel-wise) pointwise kernel, which does
//! not.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex;
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Real;
use crate::tensor::{conv2d, kernel_compose, spatial_dims, ConvKernel, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum StateOp<T> {
    /// Pointwise kernel with only its diagonal populated, one entry per channel.
    Diag(Vec<Complex<T>>),
    /// Full kernel `[P, P, k, k]`.
    Kernel(ConvKernel<Complex<T>>),
}

impl<T: Real> StateOp<T> {
    pub fn width(&self) -> usize {
        match self {
            StateOp::Diag(_) => 1,
            StateOp::Kernel(k) => k.width(),
        }
    }

    /// Apply the operator to a `[.., H, W, P]` field.
    pub fn apply(&self, x: &Tensor<Complex<T>>) -> Result<Tensor<Complex<T>>> {
        match self {
            StateOp::Diag(a) => {
                let (_, _, _, p) = spatial_dims(x.shape())?;
                if p != a.len() {
                    return Err(shape_err("diag apply", &[a.len()], x.shape()));
                }
                let mut out = x.clone();
                for px in out.data_mut().chunks_exact_mut(p) {
                    for (v, &ac) in px.iter_mut().zip(a) {
                        *v *= ac;
                    }
                }
                Ok(out)
            }
            StateOp::Kernel(k) => conv2d(k, x),
        }
    }

    fn same_variant(&self, other: &Self) -> bool {
        match (self, other) {
            (StateOp::Diag(a), StateOp::Diag(b)) => a.len() == b.len(),
            (StateOp::Kernel(a), StateOp::Kernel(b)) => a.f_out() == b.f_out() && a.f_in() == b.f_in(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: StateOp<T>,
    /// Effective input `[batch, H, W, P]`.
    pub bu: Tensor<Complex<T>>,
}

impl<T: Real> ScanElement<T> {
    /// Neutral element: unit operator and zero input.
    pub fn identity_like(other: &Self) -> Self {
        let a = match &other.a {
            StateOp::Diag(a) => StateOp::Diag(vec![Complex::one(); a.len()]),
            StateOp::Kernel(k) => StateOp::Kernel(ConvKernel::identity(k.f_out(), 1).expect("valid identity")),
        };
        Self {
            a,
            bu: Tensor::zeros(other.bu.shape()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ScanStats {
    pub operator_invocations: usize,
    /// Number of dependent stages that executed at least one combine.
    pub span: usize,
    /// Largest state-kernel width seen after each stage (general path only).
    pub width_trace: Vec<usize>,
}

impl ScanStats {
    fn absorb(&mut self, other: ScanStats) {
        self.operator_invocations += other.operator_invocations;
        self.span += other.span;
        self.width_trace.extend(other.width_trace);
    }
}

/// `qi ⊛ qj = (qj.a ∘ qi.a, qj.a ∗ qi.bu + qj.bu)`; `qi` is the earlier element.
pub fn combine<T: Real>(qi: &ScanElement<T>, qj: &ScanElement<T>) -> Result<ScanElement<T>> {
    let mut out = qj.clone();
    combine_into(qi, &mut out)?;
    Ok(out)
}

/// In-place `qj ← qi ⊛ qj`.
pub fn combine_into<T: Real>(qi: &ScanElement<T>, qj: &mut ScanElement<T>) -> Result<()> {
    if !qi.a.same_variant(&qj.a) || qi.bu.shape() != qj.bu.shape() {
        return Err(shape_err("combine", qi.bu.shape(), qj.bu.shape()));
    }
    match (&qi.a, &mut qj.a) {
        (StateOp::Diag(ai), StateOp::Diag(aj)) => {
            let p = aj.len();
            let bu_j = qj.bu.data_mut();
            for (dst, src) in bu_j.chunks_exact_mut(p).zip(qi.bu.data().chunks_exact(p)) {
                for ((d, &s), &a) in dst.iter_mut().zip(src).zip(aj.iter()) {
                    *d += a * s;
                }
            }
            for (a, &b) in aj.iter_mut().zip(ai) {
                *a *= b;
            }
        }
        (StateOp::Kernel(ki), StateOp::Kernel(kj)) => {
            let pushed = conv2d(kj, &qi.bu)?;
            qj.bu.add_assign(&pushed)?;
            *kj = kernel_compose(ki, kj)?;
        }
        _ => unreachable!("variants checked above"),
    }
    Ok(())
}

fn validate<T: Real>(elements: &[ScanElement<T>], x0: &Tensor<Complex<T>>) -> Result<()> {
    let first = elements.first().ok_or_else(|| invalid("scan needs at least one element"))?;
    if x0.shape() != first.bu.shape() {
        return Err(shape_err("scan x0", x0.shape(), first.bu.shape()));
    }
    for e in elements {
        if !e.a.same_variant(&first.a) || e.bu.shape() != first.bu.shape() {
            return Err(shape_err("scan elements", first.bu.shape(), e.bu.shape()));
        }
    }
    Ok(())
}

/// Fold `x0` into the first element: `bu_1 += A_1 ∗ x0`.
fn fold_initial<T: Real>(first: &mut ScanElement<T>, x0: &Tensor<Complex<T>>) -> Result<()> {
    if x0.data().iter().all(|z| z.is_zero()) {
        return Ok(());
    }
    let pushed = first.a.apply(x0)?;
    first.bu.add_assign(&pushed)
}

fn stack_states<T: Real>(elements: Vec<ScanElement<T>>) -> Result<Tensor<Complex<T>>> {
    let inner = elements[0].bu.shape().to_vec();
    let mut data = Vec::with_capacity(elements.len() * elements[0].bu.len());
    let l = elements.len();
    for e in elements {
        data.extend(e.bu.into_data());
    }
    let mut shape = vec![l];
    shape.extend(inner);
    Tensor::new(shape, data)
}

/// Literal recurrence, one step at a time. Returns `[L, batch, H, W, P]`.
pub fn scan_sequential<T: Real>(elements: &[ScanElement<T>], x0: &Tensor<Complex<T>>) -> Result<Tensor<Complex<T>>> {
    validate(elements, x0)?;
    let mut states = Vec::with_capacity(elements.len());
    let mut x = x0.clone();
    for e in elements {
        let mut next = e.a.apply(&x)?;
        next.add_assign(&e.bu)?;
        states.push(next.clone());
        x = next;
    }
    Tensor::stack(&states)
}

#[derive(Clone, Debug)]
pub struct ScanOptions {
    pub workers: usize,
    /// Elements per sequentially chained chunk; `None` scans in one piece.
    pub chunk_len: Option<usize>,
    /// Run the literal one-step-at-a-time recurrence instead of the tree.
    pub sequential: bool,
}

pub const DEFAULT_CHUNK_LEN: usize = 1024;

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            chunk_len: Some(DEFAULT_CHUNK_LEN),
            sequential: false,
        }
    }
}

/// Shared pool with exactly `workers` threads.
pub(crate) fn pool(workers: usize) -> Arc<rayon::ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let pools = POOLS.get_or_init(Default::default);
    let mut guard = pools.lock().unwrap_or_else(|e| e.into_inner());
    guard
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("thread pool"),
            )
        })
        .clone()
}

/// One stage: `x[j] ← x[j − d] ⊛ x[j]` for every target of the stage.
/// Sources and targets are disjoint, so targets run independently.
fn run_stage<T: Real>(
    buf: &mut [ScanElement<T>],
    offset: usize,
    d: usize,
    workers: usize,
) -> Result<usize> {
    if offset >= buf.len() {
        return Ok(0);
    }
    let view = &mut buf[offset..];
    let step = |chunk: &mut [ScanElement<T>]| -> Result<usize> {
        if chunk.len() <= d {
            return Ok(0);
        }
        let (src, dst) = chunk.split_at_mut(d);
        combine_into(&src[0], &mut dst[0])?;
        Ok(1)
    };
    if workers <= 1 {
        view.chunks_mut(2 * d).map(step).sum()
    } else {
        pool(workers).install(|| view.par_chunks_mut(2 * d).map(step).sum())
    }
}

/// Two-phase (up-sweep / down-sweep) inclusive scan. The reduction tree
/// depends only on `buf.len()`, never on `workers`.
fn tree_scan<T: Real>(buf: &mut [ScanElement<T>], workers: usize, trace_widths: bool) -> Result<ScanStats> {
    let l = buf.len();
    let mut stats = ScanStats::default();
    let record = |ops: usize, buf: &[ScanElement<T>], stats: &mut ScanStats| {
        if ops > 0 {
            stats.operator_invocations += ops;
            stats.span += 1;
            if trace_widths {
                stats.width_trace.push(buf.iter().map(|e| e.a.width()).max().unwrap_or(1));
            }
        }
    };
    let mut d = 1;
    while d < l {
        // targets j ≡ 2d−1 (mod 2d), sources j − d
        let ops = run_stage(buf, d - 1, d, workers)?;
        record(ops, buf, &mut stats);
        d *= 2;
    }
    d /= 2;
    while d >= 1 {
        // targets j = 2dm + d − 1 (m ≥ 1), sources j − d = 2dm − 1
        let ops = run_stage(buf, 2 * d - 1, d, workers)?;
        record(ops, buf, &mut stats);
        d /= 2;
    }
    Ok(stats)
}

/// Parallel scan over diagonal (or pointwise) state operators.
pub fn scan_parallel<T: Real>(
    elements: &[ScanElement<T>],
    x0: &Tensor<Complex<T>>,
    workers: usize,
) -> Result<(Tensor<Complex<T>>, ScanStats)> {
    scan_parallel_with(
        elements,
        x0,
        &ScanOptions {
            workers,
            ..Default::default()
        },
    )
}

pub fn scan_parallel_with<T: Real>(
    elements: &[ScanElement<T>],
    x0: &Tensor<Complex<T>>,
    opts: &ScanOptions,
) -> Result<(Tensor<Complex<T>>, ScanStats)> {
    validate(elements, x0)?;
    let width = elements[0].a.width();
    if width > 1 {
        return Err(Error::Refused(format!(
            "state kernels of width {width} grow to width L·({width}−1)+1 under composition, \
             making each combine cost O(P³k⁴); use scan_sequential or scan_parallel_general"
        )));
    }
    let chunk = opts.chunk_len.unwrap_or(elements.len()).max(1);
    let mut stats = ScanStats::default();
    let mut out = Vec::with_capacity(elements.len());
    let mut carry = x0.clone();
    for piece in elements.chunks(chunk) {
        let mut buf = piece.to_vec();
        fold_initial(&mut buf[0], &carry)?;
        stats.absorb(tree_scan(&mut buf, opts.workers.max(1), false)?);
        carry = buf.last().expect("non-empty chunk").bu.clone();
        out.extend(buf);
    }
    Ok((stack_states(out)?, stats))
}

/// Diagonal scan honoring [`ScanOptions::sequential`]. The sequential mode
/// reports one invocation and one stage per step.
pub fn scan_with<T: Real>(
    elements: &[ScanElement<T>],
    x0: &Tensor<Complex<T>>,
    opts: &ScanOptions,
) -> Result<(Tensor<Complex<T>>, ScanStats)> {
    if opts.sequential {
        let states = scan_sequential(elements, x0)?;
        let l = elements.len();
        Ok((states, ScanStats { operator_invocations: l, span: l, width_trace: Vec::new() }))
    } else {
        scan_parallel_with(elements, x0, opts)
    }
}

/// Parallel scan with full state kernels, composing kernels as it goes.
///
/// Kernel composition is exact only away from the field border, so the
/// result matches [`scan_sequential`] when the effective inputs vanish
/// within `L·r` pixels of the border (`r` the kernel radius).
pub fn scan_parallel_general<T: Real>(
    elements: &[ScanElement<T>],
    x0: &Tensor<Complex<T>>,
    max_kernel_width: usize,
) -> Result<(Tensor<Complex<T>>, ScanStats)> {
    validate(elements, x0)?;
    if !matches!(elements[0].a, StateOp::Kernel(_)) {
        return Err(invalid("scan_parallel_general needs full state kernels"));
    }
    let grown = elements.iter().map(|e| e.a.width() - 1).sum::<usize>() + 1;
    if grown > max_kernel_width {
        return Err(Error::Refused(format!(
            "composed state kernel would reach width {grown}, above the limit {max_kernel_width}"
        )));
    }
    let mut buf = elements.to_vec();
    fold_initial(&mut buf[0], x0)?;
    let stats = tree_scan(&mut buf, 1, true)?;
    Ok((stack_states(buf)?, stats))
}

/// `(ones, zeros)`-padded diag elements for a shared `λ̄`.
pub fn diag_elements<T: Real>(lambda_bar: &[Complex<T>], bu: &Tensor<Complex<T>>) -> Result<Vec<ScanElement<T>>> {
    if bu.rank() < 2 {
        return Err(invalid("effective inputs need a leading time axis"));
    }
    Ok((0..bu.shape()[0])
        .map(|k| ScanElement {
            a: StateOp::Diag(lambda_bar.to_vec()),
            bu: bu.index0(k),
        })
        .collect())
}
