//! Acceptance checks, one test per criterion. Each prints a single
//! `PASS`/`FAIL` line. Tests run one at a time so timings are uncontended.

use std::sync::Mutex;
use std::time::Instant;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use convssm::equivalence::field_error;
use convssm::harness::{
    median, run_bench, suite_assoc_diag, suite_assoc_general, suite_discretization, suite_gradient, suite_prop3,
    suite_scan, BenchConfig, Method,
};
use convssm::model::{ConvS5Model, ModelSpec, Precision};
use convssm::nn::Params;
use convssm::scan::{combine, diag_elements, scan_parallel, scan_parallel_general, scan_sequential, ScanElement, StateOp};
use convssm::ssm_init::{discretize, hippo_eigen_half, hippo_normal};
use convssm::numlin::{eig_hermitian, CMatrix};
use convssm::scan::ScanOptions;
use convssm::tensor::{kernel_compose, ConvKernel, Tensor};
use convssm::train::{build_convrnn, build_convs5, ModelKind, TrainConfig, TrainOutputs, Trainer};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: u32, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("{} criterion {criterion}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

fn workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8)
}

#[test]
fn criterion_01_parallel_scan_equals_sequential() {
    let _g = serial();
    let t = Instant::now();
    let r64 = suite_scan::<f64>(1, 200, workers().max(2), None).unwrap();
    let r32 = suite_scan::<f32>(1, 200, workers().max(2), None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = r64.max_abs_err < 1e-10 && r32.max_abs_err < 1e-5 && secs < 120.0;
    assert!(verdict(
        1,
        pass,
        format!(
            "200 configs each: max abs err {:.2e} (f64, < 1e-10), {:.2e} (f32, < 1e-5); {secs:.1}s (< 120s)",
            r64.max_abs_err, r32.max_abs_err
        )
    ));
}

#[test]
fn criterion_02_associativity() {
    let _g = serial();
    let d = suite_assoc_diag::<f64>(2, 1000).unwrap();
    let g = suite_assoc_general::<f64>(2, 100).unwrap();
    let pass = d.max_abs_err < 1e-10 && g.max_abs_err < 1e-8;
    assert!(verdict(
        2,
        pass,
        format!("1000 diag triples {:.2e} (< 1e-10); 100 general 3x3 triples {:.2e} (< 1e-8)", d.max_abs_err, g.max_abs_err)
    ));
}

#[test]
fn criterion_03_convolution_equals_per_pixel_recurrence() {
    let _g = serial();
    let r = suite_prop3::<f64>(3, 60, None).unwrap();
    let pass = r.max_abs_err < 1e-10 && r.samples > 0;
    assert!(verdict(3, pass, format!("60 configs, kB in {{1,3,5}}: max abs err {:.2e} (< 1e-10)", r.max_abs_err)));
}

#[test]
fn criterion_04_kernel_growth() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rk = |p: usize| {
        ConvKernel::from_vec(p, p, 3, (0..p * p * 9).map(|_| Complex::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))).collect())
            .unwrap()
    };
    let (k1, k2) = (rk(2), rk(2));
    let composed = kernel_compose(&k1, &k2).unwrap();
    let e1 = ScanElement { a: StateOp::Kernel(k1), bu: Tensor::zeros(&[1, 4, 4, 2]) };
    let e2 = ScanElement { a: StateOp::Kernel(k2), bu: Tensor::zeros(&[1, 4, 4, 2]) };
    let via_operator = combine(&e1, &e2).unwrap().a.width();
    let mut worst = 0.0f64;
    for l in 1..=8usize {
        // random inputs in a central 4x4 region with zero margins wider than
        // the state support can spread in L steps
        let (n, lo) = (4 + 2 * (l + 1), l + 1);
        let inside = |i: usize| {
            let px = (i / 2) % (n * n);
            let (r, c) = (px / n, px % n);
            (lo..lo + 4).contains(&r) && (lo..lo + 4).contains(&c)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(40 + l as u64);
        let els: Vec<ScanElement<f64>> = (0..l)
            .map(|_| {
                let k = ConvKernel::from_vec(2, 2, 3, (0..36).map(|_| Complex::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3))).collect())
                    .unwrap();
                let bu = Tensor::from_fn(&[1, n, n, 2], |i| {
                    if inside(i) { Complex::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) } else { Complex::new(0.0, 0.0) }
                });
                ScanElement { a: StateOp::Kernel(k), bu }
            })
            .collect();
        let x0 = Tensor::from_fn(&[1, n, n, 2], |i| if inside(i) { Complex::new(0.5, -0.25) } else { Complex::new(0.0, 0.0) });
        let seq = scan_sequential(&els, &x0).unwrap();
        let (par, _) = scan_parallel_general(&els, &x0, 64).unwrap();
        worst = worst.max(field_error(&seq, &par, 0).unwrap().0);
    }
    let pass = composed.width() == 5 && via_operator == 5 && worst < 1e-8;
    assert!(verdict(
        4,
        pass,
        format!("3x3 ∘ 3x3 → {0}x{0} (operator: {via_operator}); general scan vs sequential for L ≤ 8: {worst:.2e} (< 1e-8)", composed.width())
    ));
}

#[test]
fn criterion_05_work_and_span_bounds() {
    let _g = serial();
    let lam = [Complex::new(0.9, 0.1), Complex::new(0.5, -0.3)];
    let mut violations = Vec::new();
    let mut checked = 0;
    for w in [1usize, 4] {
        for l in 1..=1024usize {
            let bu = Tensor::from_fn(&[l, 1, 1, 1, 2], |i| Complex::new(i as f64, 0.0));
            let els = diag_elements(&lam, &bu).unwrap();
            let (_, s) = scan_parallel(&els, &Tensor::zeros(&[1, 1, 1, 2]), w).unwrap();
            let log = if l == 1 { 0 } else { (usize::BITS - (l - 1).leading_zeros()) as usize };
            if s.operator_invocations > 2 * (l - 1) || s.span > 2 * log {
                violations.push((w, l, s.operator_invocations, s.span));
            }
            checked += 1;
        }
    }
    assert!(verdict(
        5,
        violations.is_empty(),
        format!("{checked} scans (L = 1..=1024, 1 and 4 workers): ops ≤ 2(L−1), span ≤ 2⌈log2 L⌉; violations {:?}", &violations[..violations.len().min(3)])
    ));
}

#[test]
fn criterion_06_hippo_initialization() {
    let _g = serial();
    let mut worst_re = 0.0f64;
    let mut pairs_ok = true;
    let mut max_mod = 0.0f64;
    for p in [2usize, 8, 32, 64] {
        let (lambda, _) = hippo_eigen_half(p).unwrap();
        assert_eq!(lambda.len(), p / 2);
        for l in &lambda {
            worst_re = worst_re.max((l.re + 0.5).abs());
        }
        // full spectrum: A + ½I is skew, so −i(A + ½I) is Hermitian with
        // eigenvalues in ± pairs, i.e. A's eigenvalues pair as conjugates
        let a = hippo_normal(p).unwrap();
        let h = CMatrix::from_fn(p, |i, j| Complex::new(0.0, -(a[i * p + j] + if i == j { 0.5 } else { 0.0 })));
        let mut w = eig_hermitian(&h).unwrap().eigenvalues;
        w.sort_by(|x, y| x.total_cmp(y));
        for i in 0..p {
            pairs_ok &= (w[i] + w[p - 1 - i]).abs() < 1e-8;
        }
        let mut imag: Vec<f64> = lambda.iter().map(|l| l.im).collect();
        imag.sort_by(|x, y| x.total_cmp(y));
        let pos: Vec<f64> = w[p / 2..].to_vec();
        pairs_ok &= imag.iter().zip(&pos).all(|(a, b)| (a - b).abs() < 1e-8);
        for k in 0..=40 {
            let dt = 10f64.powf(-3.0 + 2.0 * k as f64 / 40.0);
            let d = discretize(&lambda, &vec![Complex::new(1.0, 0.0); lambda.len()], &vec![dt; lambda.len()]);
            for lb in &d.lambda_bar {
                max_mod = max_mod.max(lb.norm());
            }
        }
    }
    let pass = worst_re <= 1e-8 && pairs_ok && max_mod < 1.0;
    assert!(verdict(
        6,
        pass,
        format!("P ∈ {{2,8,32,64}}: max |Re λ + 0.5| {worst_re:.1e} (≤ 1e-8), conjugate pairs {pairs_ok}, max |λ̄| over Δ ∈ [1e-3, 1e-1] {max_mod:.6} (< 1)")
    ));
}

#[test]
fn criterion_07_discretization_matches_quadrature() {
    let _g = serial();
    let r = suite_discretization(7, 1000, None).unwrap();
    assert!(verdict(7, r.max_abs_err < 1e-10, format!("1000 samples incl. |λ|→0: max abs err {:.2e} (< 1e-10); {}", r.max_abs_err, r.shapes.join("; "))));
}

#[test]
fn criterion_08_gradients_match_finite_differences() {
    let _g = serial();
    let t = Instant::now();
    let r = suite_gradient(8, None).unwrap();
    let secs = t.elapsed().as_secs_f64();
    // every parameter tensor must be covered, including the step sizes
    let spec = ModelSpec { layers: 1, p: 4, u: 2, precision: Precision::F64, ..Default::default() };
    let tensors = ConvS5Model::<f64>::init(&spec, 8).unwrap().layout();
    let covers_dt = tensors.iter().any(|(n, _, _)| n.contains("log_dt"));
    let pass = r.max_abs_err < 1e-5 && r.samples >= 50 && covers_dt && secs < 60.0;
    assert!(verdict(
        8,
        pass,
        format!("{} scalars over {} tensors: max rel err {:.2e} (< 1e-5); {secs:.2}s (< 60s); {}", r.samples, tensors.len(), r.max_abs_err, r.shapes.join("; "))
    ));
}

#[test]
fn criterion_09_scaling() {
    let _g = serial();
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cfg = BenchConfig {
        methods: vec![Method::ConvS5Par, Method::ConvRnn],
        lengths: vec![64, 128, 256, 512, 1024],
        p: vec![32],
        threads: vec![1, 8],
        ..Default::default()
    };
    let r = run_bench::<f32>(&cfg, |_| {}).unwrap();
    let slope = r.fits.iter().find(|f| f.method == Method::ConvS5Par && f.threads == 1).unwrap().slope;
    let s5 = r.speedups.iter().find(|s| s.method == Method::ConvS5Par).unwrap().speedup;
    let rnn = r.speedups.iter().find(|s| s.method == Method::ConvRnn).unwrap().speedup;
    let rnn_span_is_l = r.rows.iter().filter(|row| row.method == Method::ConvRnn).all(|row| row.span == row.l);
    let slope_ok = (0.8..=1.2).contains(&slope);
    let speedup_ok = s5 >= 1.5;
    // the recurrent baseline cannot use extra workers
    let rnn_flat = rnn < 1.5 && rnn_span_is_l;
    let pass = slope_ok && speedup_ok && rnn_flat;
    verdict(
        9,
        pass,
        format!(
            "convs5-par slope {slope:.3} (in [0.8, 1.2]); 8 vs 1 worker speedup at L=1024 {s5:.2}x (≥ 1.5x); convrnn speedup {rnn:.2}x, span == L {rnn_span_is_l}; host has {cores} CPU(s)"
        ),
    );
    assert!(slope_ok, "log-log slope {slope} outside [0.8, 1.2]");
    assert!(rnn_flat, "convrnn speedup {rnn} / span check {rnn_span_is_l}");
    if cores >= 8 {
        assert!(speedup_ok, "speedup {s5} < 1.5 with {cores} CPUs");
    } else {
        // Eight workers on fewer than eight cores cannot be measured as a
        // speedup; the line above records the outcome.
        eprintln!("criterion 9 speedup not assertable on {cores} CPU(s)");
    }
}

#[test]
fn criterion_10_constant_cost_generation() {
    let _g = serial();
    let spec = ModelSpec { precision: Precision::F32, ..Default::default() };
    let model = ConvS5Model::<f32>::init(&spec, 10).unwrap();
    let ctx: Tensor<f32> = Tensor::from_fn(&[20, 1, 16, 16, 1], |i| ((i % 17) as f32) / 17.0);
    let opts = ScanOptions { workers: 1, ..Default::default() };
    let mut per_step: Vec<Vec<f64>> = vec![Vec::new(); 211];
    for _ in 0..3 {
        let (_, times) = model.autoregress(&ctx, 211, &opts).unwrap();
        for (k, t) in times.iter().enumerate() {
            per_step[k].push(t.as_secs_f64() * 1e3);
        }
    }
    let window = |c: usize| {
        let mut v: Vec<f64> = (c - 5..=c + 5).flat_map(|k| per_step[k].iter().copied()).collect();
        median(&mut v)
    };
    let (at10, at200) = (window(10), window(200));
    let pass = at200 < 2.0 * at10;
    assert!(verdict(10, pass, format!("median step time at step 200 {at200:.3} ms vs step 10 {at10:.3} ms (ratio {:.2} < 2)", at200 / at10)));
}

#[test]
fn criterion_11_desk_scale_learning() {
    let _g = serial();
    let cfg = TrainConfig::default();
    assert_eq!((cfg.spec.layers, cfg.spec.p, cfg.spec.u, cfg.data.grid, cfg.data.seq_len, cfg.steps), (2, 32, 16, 16, 40, 2000));
    assert_eq!(cfg.spec.precision, Precision::F32);
    let data = cfg.data.generate().unwrap();
    let opts = ScanOptions { workers: 1, ..Default::default() };
    let mut s5 = Trainer::new(cfg.clone(), build_convs5::<f32>(&cfg).unwrap(), opts.clone());
    let a = s5.run(&data, &TrainOutputs::default()).unwrap();

    let mut rnn_cfg = cfg.clone();
    rnn_cfg.model = ModelKind::ConvRnn;
    rnn_cfg.time_budget_s = a.wall_s;
    let rnn_model = build_convrnn::<f32>(&rnn_cfg).unwrap();
    let matched = (rnn_model.param_count() as f64 - a.params as f64).abs() / a.params as f64;
    let mut rnn = Trainer::new(rnn_cfg, rnn_model, opts);
    let b = rnn.run(&data, &TrainOutputs::default()).unwrap();

    let ratio = a.eval.rollout.mse / a.eval.copy_last.mse;
    let pass = ratio <= 0.7 && a.eval.rollout.mse < b.eval.rollout.mse && a.wall_s < 600.0 && matched < 0.1;
    assert!(verdict(
        11,
        pass,
        format!(
            "ConvS5 rollout MSE {:.5} = {ratio:.3}x copy-last {:.5} (≤ 0.7x); ConvRNN ({} vs {} params, {} steps in {:.0}s) MSE {:.5} (ConvS5 must be lower); ConvS5 trained {} steps in {:.0}s (< 600s)",
            a.eval.rollout.mse, a.eval.copy_last.mse, b.params, a.params, b.steps_run, b.wall_s, b.eval.rollout.mse, a.steps_run, a.wall_s
        )
    ));
}

#[test]
fn criterion_12_split_and_carry() {
    let _g = serial();
    let spec = ModelSpec { precision: Precision::F64, ..Default::default() };
    let model = ConvS5Model::<f64>::init(&spec, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let l = 24;
    let frames: Tensor<f64> = Tensor::from_fn(&[l, 2, 8, 8, 1], |_| rng.gen_range(0.0..1.0));
    let opts = ScanOptions::default();
    let zero = model.zero_states(2, 8, 8);
    let (whole, whole_states) = model.apply(&frames, &zero, &opts).unwrap();
    let mut worst = 0.0f64;
    for trial in 0..6 {
        let mut cuts: Vec<usize> = (0..trial).map(|_| rng.gen_range(1..l)).collect();
        cuts.extend([0, l]);
        cuts.sort_unstable();
        cuts.dedup();
        let mut states = zero.clone();
        let mut outs = Vec::new();
        for w in cuts.windows(2) {
            let (y, s) = model.apply(&frames.slice0(w[0], w[1]), &states, &opts).unwrap();
            outs.push(y);
            states = s;
        }
        let joined = Tensor::concat0(&outs).unwrap();
        worst = worst.max(joined.max_abs_diff(&whole));
        for (a, b) in states.iter().zip(&whole_states) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    assert!(verdict(12, worst < 1e-10, format!("2-layer model, 6 random split sets over L=24: max abs diff {worst:.2e} (< 1e-10)")));
}
