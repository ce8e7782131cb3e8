//! Correctness suites and scaling benchmarks behind the command line.

use std::time::Instant;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::equivalence::{associativity_error, check_prop3_split, field_error, tolerance_for, EquivalenceReport};
use crate::error::{invalid, Result};
use crate::grad::check_gradients;
use crate::layer::{ConvS5Layer, LayerConfig};
use crate::model::{ConvRnnLayer, ConvS5Model, ModelSpec, Precision, SeqLayer};
use crate::nn::{ActivationKind, Loss};
use crate::scalar::Real;
use crate::scan::{diag_elements, scan_parallel_with, scan_sequential, ScanElement, ScanOptions, StateOp};
use crate::ssm_init::{discretize, LAMBDA_EPS};
use crate::tensor::{ConvKernel, Tensor};

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "CSSM_THREADS";

/// Worker count: a positive `CSSM_THREADS` wins over the flag, which wins
/// over the machine's available parallelism.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>) -> Result<usize> {
    if let Some(v) = env {
        return match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        };
    }
    match flag {
        Some(0) => Err(invalid("--threads must be positive")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Prop1,
    Prop3,
    Gradient,
    Discretization,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "prop1" => Suite::Prop1,
            "prop3" => Suite::Prop3,
            "gradient" => Suite::Gradient,
            "discretization" => Suite::Discretization,
            "all" => Suite::All,
            _ => return Err(invalid(format!("unknown suite {s:?}"))),
        })
    }

    fn includes(self, other: Suite) -> bool {
        self == Suite::All || self == other
    }
}

/// Deliberate corruption used to confirm that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Perturb one λ̄ entry on the checked side of each comparison.
    CorruptLambdaBar,
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub suite: Suite,
    pub precision: Precision,
    pub seed: u64,
    pub workers: usize,
    pub fault: Option<Fault>,
}

fn rc<T: Real>(rng: &mut ChaCha8Rng, scale: f64) -> Complex<T> {
    Complex::new(T::of(rng.gen_range(-scale..scale)), T::of(rng.gen_range(-scale..scale)))
}

fn rand_lambda_bar<T: Real>(rng: &mut ChaCha8Rng, p: usize) -> Vec<Complex<T>> {
    (0..p)
        .map(|_| {
            let z = Complex::from_polar(rng.gen_range(0.0..0.9), rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
            Complex::new(T::of(z.re), T::of(z.im))
        })
        .collect()
}

fn rand_field<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<Complex<T>> {
    Tensor::from_fn(shape, |_| rc(rng, 1.0))
}

fn corrupt<T: Real>(lambda_bar: &mut [Complex<T>]) {
    lambda_bar[0] = lambda_bar[0] * T::of(1.001) + Complex::new(T::of(1e-3), T::zero());
}

/// Parallel vs sequential diagonal scans over a random grid of shapes.
pub fn suite_scan<T: Real>(seed: u64, configs: usize, workers: usize, fault: Option<Fault>) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EquivalenceReport::new("prop1.scan", tolerance_for::<T>());
    for c in 0..configs {
        let l = match c {
            0 => 1,
            1 => 257,
            _ => rng.gen_range(1..=257),
        };
        let p = [2, 4, 8][rng.gen_range(0..3)];
        let (h, w, b) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=2));
        let lam = rand_lambda_bar::<T>(&mut rng, p);
        let bu = rand_field::<T>(&mut rng, &[l, b, h, w, p]);
        let x0 = rand_field::<T>(&mut rng, &[b, h, w, p]);
        let chunk = [None, Some(16), Some(64)][rng.gen_range(0..3)];
        let opts = ScanOptions { workers: rng.gen_range(1..=workers.max(1)), chunk_len: chunk, ..Default::default() };
        let els = diag_elements(&lam, &bu)?;
        let seq = scan_sequential(&els, &x0)?;
        let mut par_lam = lam.clone();
        if fault.is_some() {
            corrupt(&mut par_lam);
        }
        let (par, _) = scan_parallel_with(&diag_elements(&par_lam, &bu)?, &x0, &opts)?;
        let (m, s, n) = field_error(&seq, &par, 0)?;
        report.record(m, s, n);
        if c < 3 {
            report.shapes.push(format!("L={l} P={p} H={h} W={w} batch={b}"));
        }
    }
    report.shapes.push(format!("{configs} configs, L in 1..=257, P in {{2,4,8}}, H,W in 1..=5, batch in 1..=2"));
    Ok(report)
}

/// `(q1⊛q2)⊛q3` vs `q1⊛(q2⊛q3)` for random diagonal triples.
pub fn suite_assoc_diag<T: Real>(seed: u64, triples: usize) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa55c);
    let mut report = EquivalenceReport::new("prop1.assoc.diag", tolerance_for::<T>());
    for _ in 0..triples {
        let p = rng.gen_range(1..=8);
        let shape = [rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4), p];
        let mut q = Vec::with_capacity(3);
        for _ in 0..3 {
            let lam: Vec<Complex<T>> = (0..p).map(|_| rc(&mut rng, 1.0)).collect();
            q.push(ScanElement { a: StateOp::Diag(lam), bu: rand_field(&mut rng, &shape) });
        }
        let (m, s, n) = associativity_error(&q[0], &q[1], &q[2], 0)?;
        report.record(m, s, n);
    }
    report.shapes.push(format!("{triples} triples, P in 1..=8, fields up to 2x4x4"));
    Ok(report)
}

/// Associativity for full 3×3 state kernels on 9×9 fields, compared on
/// pixels where zero-padded composition is exact.
pub fn suite_assoc_general<T: Real>(seed: u64, triples: usize) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e11);
    let mut report = EquivalenceReport::new("prop1.assoc.general", 1e-8f64.max(tolerance_for::<T>()));
    for _ in 0..triples {
        let p = rng.gen_range(1..=2);
        let mut q = Vec::with_capacity(3);
        for _ in 0..3 {
            let k = ConvKernel::from_vec(p, p, 3, (0..p * p * 9).map(|_| rc::<T>(&mut rng, 0.3)).collect())?;
            q.push(ScanElement { a: StateOp::Kernel(k), bu: rand_field(&mut rng, &[1, 9, 9, p]) });
        }
        let (m, s, n) = associativity_error(&q[0], &q[1], &q[2], 3)?;
        report.record(m, s, n);
    }
    report.shapes.push(format!("{triples} triples of 3x3 kernels, P in 1..=2, 9x9 fields, interior margin 3"));
    Ok(report)
}

/// Convolutional recurrence vs per-pixel recurrences over im2col columns.
pub fn suite_prop3<T: Real>(seed: u64, configs: usize, fault: Option<Fault>) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3333);
    let mut report = EquivalenceReport::new("prop3", tolerance_for::<T>());
    for c in 0..configs {
        let p = rng.gen_range(1..=4);
        let u = rng.gen_range(1..=3);
        let kb = [1, 3, 5][c % 3];
        let (h, w, l, b) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=8), rng.gen_range(1..=2));
        let scale = 0.5 / (p as f64).sqrt();
        let a: Vec<Complex<T>> = (0..p * p).map(|_| rc(&mut rng, scale)).collect();
        let mut a_pixel = a.clone();
        if fault.is_some() {
            corrupt(&mut a_pixel);
        }
        let a = ConvKernel::from_vec(p, p, 1, a)?;
        let a_pixel = ConvKernel::from_vec(p, p, 1, a_pixel)?;
        let bk = ConvKernel::from_vec(p, u, kb, (0..p * u * kb * kb).map(|_| rc(&mut rng, 1.0)).collect())?;
        let uu = rand_field(&mut rng, &[l, b, h, w, u]);
        let x0 = rand_field(&mut rng, &[b, h, w, p]);
        let r = check_prop3_split(&a, &a_pixel, &bk, &uu, &x0)?;
        report.merge(&r);
    }
    report.shapes.truncate(3);
    report.shapes.push(format!("{configs} configs, kB in {{1,3,5}}, P in 1..=4, U in 1..=3, H,W in 1..=6, L in 1..=8"));
    Ok(report)
}

/// Simpson quadrature of `∫_0^Δ e^{λs} ds` with `n` (even) panels.
pub fn zoh_quadrature(lambda: Complex<f64>, dt: f64, n: usize) -> Complex<f64> {
    let h = dt / n as f64;
    let f = |s: f64| (lambda * s).exp();
    let mut acc = f(0.0) + f(dt);
    for i in 1..n {
        acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * (h / 3.0)
}

/// Closed-form zero-order hold vs quadrature of its defining integral.
pub fn suite_discretization(seed: u64, samples: usize, fault: Option<Fault>) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd15c);
    let mut report = EquivalenceReport::new("discretization", 1e-10);
    let mut limit_branch = 0;
    for i in 0..samples {
        let lambda = match i % 10 {
            // the small-|λ| limit branch and its neighbourhood
            0 => Complex::new(-rng.gen_range(1e-15..LAMBDA_EPS), rng.gen_range(-1e-15..1e-15)),
            1 => Complex::new(-rng.gen_range(1e-9..1e-6), rng.gen_range(-1e-6..1e-6)),
            _ => Complex::new(-rng.gen_range(1e-4..10.0f64), rng.gen_range(-10.0..10.0)),
        };
        if lambda.norm() < LAMBDA_EPS {
            limit_branch += 1;
        }
        let dt = (rng.gen_range((1e-3f64).ln()..(1.0f64).ln())).exp();
        let bt = [rc::<f64>(&mut rng, 1.0), rc::<f64>(&mut rng, 1.0)];
        let mut d = discretize(&[lambda], &bt, &[dt]);
        if fault.is_some() {
            corrupt(&mut d.lambda_bar);
        }
        let integral = zoh_quadrature(lambda, dt, 4096);
        let exact_bar = Complex::from_polar((lambda.re * dt).exp(), lambda.im * dt);
        let mut max: f64 = (d.lambda_bar[0] - exact_bar).norm();
        let mut sum = max;
        for (got, b) in d.b_bar.iter().zip(&bt) {
            let e = (got - integral * b).norm();
            max = max.max(e);
            sum += e;
        }
        report.record(max, sum, 3);
    }
    report.shapes.push(format!("{samples} samples, Re λ < 0, Δ in [1e-3, 1], {limit_branch} on the |λ|→0 branch"));
    Ok(report)
}

/// Analytic vs central-difference gradients of a one-layer model
/// (P=4, U=2, L=3, H=W=3) in 64-bit. The report's error is relative.
pub fn suite_gradient(seed: u64, fault: Option<Fault>) -> Result<EquivalenceReport> {
    let spec = ModelSpec { layers: 1, p: 4, u: 2, kb: 3, kc: 3, dt_min: 0.01, dt_max: 0.5, precision: Precision::F64, ..Default::default() };
    let model = ConvS5Model::<f64>::init(&spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6ad);
    // four frames: three inputs, three shifted targets
    let seq = Tensor::from_fn(&[4, 1, 3, 3, 1], |_| rng.gen_range(0.0..1.0));
    let opts = ScanOptions::default();
    let (_, mut grad) = model.loss_and_grad(&seq, Loss::Mse, &opts)?;
    if fault.is_some() {
        grad.layers[0].dynamics.log_dt[0] += 1e-2;
    }
    let tensors = model_tensor_count(&model);
    let per_tensor = 50usize.div_ceil(tensors).max(4);
    let r = check_gradients(&model, &grad, per_tensor, 1e-5, |m| m.loss(&seq, Loss::Mse, &opts))?;
    let mut report = EquivalenceReport::new("gradient", 1e-5);
    report.record(r.max_rel_error, r.max_rel_error, 1);
    report.samples = r.checked;
    report.shapes.push(format!("1 layer P=4 U=2 L=3 H=W=3; {} scalars over {} tensors; worst {}", r.checked, r.tensors, r.worst));
    Ok(report)
}

fn model_tensor_count(m: &ConvS5Model<f64>) -> usize {
    use crate::nn::Params;
    m.layout().len()
}

/// Run the selected suites.
pub fn run_verify(opts: &VerifyOptions) -> Result<Vec<EquivalenceReport>> {
    match opts.precision {
        Precision::F32 => run_verify_typed::<f32>(opts),
        Precision::F64 => run_verify_typed::<f64>(opts),
    }
}

fn run_verify_typed<T: Real>(o: &VerifyOptions) -> Result<Vec<EquivalenceReport>> {
    let mut out = Vec::new();
    if o.suite.includes(Suite::Prop1) {
        out.push(suite_scan::<T>(o.seed, 200, o.workers, o.fault)?);
        out.push(suite_assoc_diag::<T>(o.seed, 1000)?);
        if std::mem::size_of::<T>() == 8 {
            out.push(suite_assoc_general::<T>(o.seed, 100)?);
        }
    }
    if o.suite.includes(Suite::Prop3) {
        out.push(suite_prop3::<T>(o.seed, 60, o.fault)?);
    }
    if o.suite.includes(Suite::Gradient) {
        out.push(suite_gradient(o.seed, o.fault)?);
    }
    if o.suite.includes(Suite::Discretization) {
        out.push(suite_discretization(o.seed, 1000, o.fault)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- bench

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    #[serde(rename = "convs5-par")]
    ConvS5Par,
    #[serde(rename = "convs5-seq")]
    ConvS5Seq,
    #[serde(rename = "convrnn")]
    ConvRnn,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "convs5-par" => Method::ConvS5Par,
            "convs5-seq" => Method::ConvS5Seq,
            "convrnn" => Method::ConvRnn,
            _ => return Err(invalid(format!("unknown method {s:?}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::ConvS5Par => "convs5-par",
            Method::ConvS5Seq => "convs5-seq",
            Method::ConvRnn => "convrnn",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub lengths: Vec<usize>,
    pub p: Vec<usize>,
    pub threads: Vec<usize>,
    pub grid: usize,
    pub u: usize,
    pub batch: usize,
    pub repeats: usize,
    pub precision: &'static str,
    pub seed: u64,
    pub backward: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::ConvS5Par],
            lengths: vec![64, 128, 256, 512, 1024],
            p: vec![32],
            threads: vec![1],
            grid: 16,
            u: 16,
            batch: 1,
            repeats: 3,
            precision: "f32",
            seed: 0,
            backward: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub method: Method,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub threads: usize,
    pub wall_ms: f64,
    pub operator_invocations: usize,
    pub span: usize,
    pub repeats: usize,
    pub pass: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingFit {
    pub method: Method,
    #[serde(rename = "P")]
    pub p: usize,
    pub threads: usize,
    /// Least-squares slope of ln(wall_ms) against ln(L).
    pub slope: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Speedup {
    pub method: Method,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub threads_low: usize,
    pub threads_high: usize,
    /// wall(threads_low) / wall(threads_high)
    pub speedup: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fits: Vec<ScalingFit>,
    pub speedups: Vec<Speedup>,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn time_layer<T: Real, L: SeqLayer<T>>(
    layer: &L,
    u: &Tensor<T>,
    state: &L::State,
    opts: &ScanOptions,
    repeats: usize,
    backward: bool,
    grad: &mut L,
) -> Result<(f64, usize, usize, Vec<f64>)> {
    let mut times = Vec::with_capacity(repeats);
    let (mut ops, mut span) = (0, 0);
    // one untimed warm-up pass
    let _ = layer.forward(u, state, opts, 0)?;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let (y, _, cache) = layer.forward(u, state, opts, 0)?;
        if backward {
            layer.backward(&cache, &y, None, grad, opts)?;
        }
        times.push(t.elapsed().as_secs_f64() * 1e3);
        (ops, span) = L::scan_stats(&cache, u.shape()[0]);
    }
    let all = times.clone();
    Ok((median(&mut times), ops, span, all))
}

/// Time single-layer forward (optionally forward+backward) passes over the grid.
/// Grid points run one at a time; each reports the median of `repeats`.
pub fn run_bench<T: Real>(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.p.is_empty() || cfg.threads.is_empty() || cfg.methods.is_empty() {
        return Err(invalid("bench grid is empty"));
    }
    let mut rows = Vec::new();
    let (g, u) = (cfg.grid, cfg.u);
    let max_l = *cfg.lengths.iter().max().expect("non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input: Tensor<T> = Tensor::from_fn(&[max_l, cfg.batch, g, g, u], |_| T::of(rng.gen_range(-1.0..1.0)));
    for &method in &cfg.methods {
        for &p in &cfg.p {
            for &threads in &cfg.threads {
                for &l in &cfg.lengths {
                    let x = input.slice0(0, l);
                    let opts = ScanOptions { workers: threads, sequential: method == Method::ConvS5Seq, ..Default::default() };
                    let (wall_ms, ops, span, _) = match method {
                        Method::ConvS5Par | Method::ConvS5Seq => {
                            let lc = LayerConfig { p, u, kb: 3, kc: 3, use_d: false, activation: ActivationKind::ResNet, dt_min: 1e-3, dt_max: 0.1 };
                            let layer = ConvS5Layer::<T>::init(&lc, cfg.seed)?;
                            let mut grad = layer.zeros_like();
                            let st = SeqLayer::zero_state(&layer, cfg.batch, g, g);
                            time_layer(&layer, &x, &st, &opts, cfg.repeats, cfg.backward, &mut grad)?
                        }
                        Method::ConvRnn => {
                            let layer = ConvRnnLayer::<T>::init(p, u, 3, 3, ActivationKind::ResNet, cfg.seed)?;
                            let mut grad = layer.zeros_like();
                            let st = layer.zero_state(cfg.batch, g, g);
                            time_layer(&layer, &x, &st, &opts, cfg.repeats, cfg.backward, &mut grad)?
                        }
                    };
                    let row = BenchRow {
                        method,
                        l,
                        p,
                        h: g,
                        w: g,
                        threads,
                        wall_ms,
                        operator_invocations: ops,
                        span,
                        repeats: cfg.repeats,
                        pass: if cfg.backward { "forward+backward" } else { "forward" },
                    };
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
    }
    let mut fits = Vec::new();
    let mut speedups = Vec::new();
    for &method in &cfg.methods {
        for &p in &cfg.p {
            for &threads in &cfg.threads {
                let pts: Vec<&BenchRow> = rows.iter().filter(|r| r.method == method && r.p == p && r.threads == threads).collect();
                if pts.len() >= 2 {
                    let x: Vec<f64> = pts.iter().map(|r| r.l as f64).collect();
                    let y: Vec<f64> = pts.iter().map(|r| r.wall_ms).collect();
                    fits.push(ScalingFit { method, p, threads, slope: loglog_slope(&x, &y) });
                }
            }
            let lo = *cfg.threads.iter().min().expect("non-empty");
            let hi = *cfg.threads.iter().max().expect("non-empty");
            if lo != hi {
                let at = |t: usize| rows.iter().find(|r| r.method == method && r.p == p && r.threads == t && r.l == max_l).map(|r| r.wall_ms);
                if let (Some(a), Some(b)) = (at(lo), at(hi)) {
                    speedups.push(Speedup { method, p, l: max_l, threads_low: lo, threads_high: hi, speedup: a / b });
                }
            }
        }
    }
    Ok(BenchReport { rows, fits, speedups })
}
