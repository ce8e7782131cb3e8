//! `convssm` command-line front end: correctness suites, scaling benchmarks,
//! training and autoregressive rollout.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use convssm::container::{Container, Storable};
use convssm::data::PSNR_CAP;
use convssm::harness::{
    median, resolve_threads, run_bench, run_verify, BenchConfig, BenchRow, Fault, Method, Suite, VerifyOptions,
    THREADS_ENV,
};
use convssm::model::{load_params, ConvRnnModel, ConvS5Model, Precision, SeqLayer, Stack};
use convssm::nn::Params;
use convssm::scalar::Real;
use convssm::scan::ScanOptions;
use convssm::train::{
    build_convrnn, build_convs5, run_rollout, CheckpointInfo, ModelKind, TrainConfig, TrainOutputs, Trainer,
};
use convssm::Error;

#[derive(Parser)]
#[command(name = "convssm", version, about = "Convolutional state space models: verification, benchmarks, training")]
struct Cli {
    /// Worker threads (default: available parallelism; CSSM_THREADS overrides).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the equivalence, gradient and discretization suites.
    Verify(VerifyArgs),
    /// Time single-layer passes over a grid of sequence lengths, widths and threads.
    Bench(BenchArgs),
    /// Train on bouncing-blob next-frame prediction.
    Train(TrainArgs),
    /// Generate frames from a checkpoint after conditioning on test frames.
    Rollout(RolloutArgs),
    /// Print build and environment details, or describe a container file.
    Info(InfoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Prop1,
    Prop3,
    Gradient,
    Discretization,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    #[arg(long, value_enum, default_value = "f64")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt λ̄ on the checked side of every comparison (harness self-test).
    #[arg(long)]
    inject_fault: bool,
    /// LDJSON report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated methods: convs5-par, convs5-seq, convrnn.
    #[arg(long, value_delimiter = ',', default_value = "convs5-par,convs5-seq,convrnn")]
    method: Vec<String>,
    #[arg(long = "L", value_delimiter = ',', default_value = "64,128,256,512,1024")]
    lengths: Vec<usize>,
    #[arg(long = "P", value_delimiter = ',', default_value = "32")]
    p: Vec<usize>,
    /// Thread counts to sweep (default: the resolved --threads value).
    #[arg(long, value_delimiter = ',')]
    thread_grid: Option<Vec<usize>>,
    /// Spatial size H = W.
    #[arg(long, default_value_t = 16)]
    grid: usize,
    #[arg(long = "U", default_value_t = 16)]
    u: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Time forward+backward instead of forward only.
    #[arg(long)]
    backward: bool,
    /// LDJSON report path; the CSV twin is written next to it with a .csv extension.
    #[arg(long, default_value = "bench.ldjson")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value config file (default: built-in defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. --set steps=500 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides the config's precision.
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "checkpoint.cssm")]
    checkpoint: PathBuf,
    /// LDJSON metrics log (appended).
    #[arg(long, default_value = "train.ldjson")]
    log: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save the generated dataset to this container file.
    #[arg(long)]
    save_data: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    context: usize,
    #[arg(long, default_value_t = 20)]
    horizon: usize,
    /// Index into the held-out split.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Container receiving the context and generated frames.
    #[arg(long, default_value = "rollout.cssm")]
    out: PathBuf,
    /// LDJSON report path (default: stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InfoArgs {
    /// Describe this container file.
    file: Option<PathBuf>,
}

type AnyResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

/// Line-delimited JSON written to a file or stdout.
struct Ldjson(Box<dyn Write>);

impl Ldjson {
    fn open(path: Option<&Path>) -> io::Result<Self> {
        Ok(Self(match path {
            Some(p) => Box::new(BufWriter::new(File::create(p)?)),
            None => Box::new(io::stdout().lock()),
        }))
    }

    fn append(path: &Path) -> io::Result<Self> {
        Ok(Self(Box::new(BufWriter::new(File::options().create(true).append(true).open(path)?))))
    }

    fn record(&mut self, kind: &str, body: impl Serialize) -> io::Result<()> {
        let mut v = serde_json::to_value(body).map_err(io::Error::other)?;
        if let Value::Object(m) = &mut v {
            m.insert("record".into(), Value::from(kind));
        }
        writeln!(self.0, "{v}")
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

fn environment(threads: usize, precision: Precision) -> Value {
    json!({
        "threads": threads,
        "available_parallelism": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        "precision": precision.name(),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "version": env!("CARGO_PKG_VERSION"),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env = std::env::var(THREADS_ENV).ok();
    let threads = match resolve_threads(cli.threads, env.as_deref()) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    // data generation and other bulk work use the global pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    let result = match cli.command {
        Command::Verify(a) => verify(a, threads),
        Command::Bench(a) => bench(a, threads),
        Command::Train(a) => train(a, threads),
        Command::Rollout(a) => rollout(a, threads),
        Command::Info(a) => info(a, threads),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn verify(a: VerifyArgs, threads: usize) -> AnyResult<ExitCode> {
    let suite = match a.suite {
        SuiteArg::Prop1 => Suite::Prop1,
        SuiteArg::Prop3 => Suite::Prop3,
        SuiteArg::Gradient => Suite::Gradient,
        SuiteArg::Discretization => Suite::Discretization,
        SuiteArg::All => Suite::All,
    };
    let opts = VerifyOptions {
        suite,
        precision: a.precision.into(),
        seed: a.seed,
        workers: threads,
        fault: a.inject_fault.then_some(Fault::CorruptLambdaBar),
    };
    let reports = run_verify(&opts)?;
    let mut out = Ldjson::open(a.out.as_deref())?;
    out.record(
        "config",
        json!({
            "command": "verify",
            "suite": format!("{suite:?}").to_lowercase(),
            "precision": opts.precision.name(),
            "seed": a.seed,
            "inject_fault": a.inject_fault,
            "threads": threads,
        }),
    )?;
    for r in &reports {
        out.record("equivalence", r)?;
        eprintln!(
            "{:<22} {}  max_abs_err {:.3e}  tol {:.0e}  samples {}",
            r.check,
            if r.pass { "PASS" } else { "FAIL" },
            r.max_abs_err,
            r.tolerance,
            r.samples
        );
    }
    let worst = reports
        .iter()
        .filter(|r| !r.pass)
        .max_by(|x, y| (x.max_abs_err / x.tolerance).total_cmp(&(y.max_abs_err / y.tolerance)));
    let pass = worst.is_none();
    out.record("summary", json!({ "pass": pass, "checks": reports.len(), "worst": worst.map(|w| &w.check) }))?;
    out.flush()?;
    if let Some(w) = worst {
        eprintln!("worst offender: {} (max_abs_err {:.3e} > {:.0e}) {:?}", w.check, w.max_abs_err, w.tolerance, w.shapes);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(a: BenchArgs, threads: usize) -> AnyResult<ExitCode> {
    let methods = a.method.iter().map(|m| Method::parse(m.trim())).collect::<Result<Vec<_>, _>>()?;
    let precision: Precision = a.precision.into();
    let cfg = BenchConfig {
        methods,
        lengths: a.lengths,
        p: a.p,
        threads: a.thread_grid.unwrap_or_else(|| vec![threads]),
        grid: a.grid,
        u: a.u,
        batch: a.batch,
        repeats: a.repeats,
        precision: precision.name(),
        seed: a.seed,
        backward: a.backward,
    };
    let mut out = Ldjson::open(Some(&a.out))?;
    let csv_path = a.out.with_extension("csv");
    let mut csv = csv::Writer::from_path(&csv_path)?;
    out.record("config", json!({ "command": "bench", "config": &cfg }))?;
    out.record("environment", environment(threads, precision))?;
    let mut write_err = None;
    let mut on_row = |row: &BenchRow| {
        eprintln!(
            "{:<11} L={:<5} P={:<3} threads={:<2} {:>10.3} ms  ops={} span={}",
            row.method.name(),
            row.l,
            row.p,
            row.threads,
            row.wall_ms,
            row.operator_invocations,
            row.span
        );
        let r = out.record("row", row).map_err(Box::<dyn std::error::Error>::from).and_then(|_| Ok(csv.serialize(row)?));
        if let Err(e) = r {
            write_err.get_or_insert(e);
        }
    };
    let report = match precision {
        Precision::F32 => run_bench::<f32>(&cfg, &mut on_row)?,
        Precision::F64 => run_bench::<f64>(&cfg, &mut on_row)?,
    };
    if let Some(e) = write_err {
        return Err(e);
    }
    for f in &report.fits {
        out.record("fit", f)?;
        eprintln!("fit {:<11} P={} threads={}: slope {:.3}", f.method.name(), f.p, f.threads, f.slope);
    }
    for s in &report.speedups {
        out.record("speedup", s)?;
        eprintln!(
            "speedup {:<11} P={} L={}: {} vs {} threads = {:.2}x",
            s.method.name(),
            s.p,
            s.l,
            s.threads_low,
            s.threads_high,
            s.speedup
        );
    }
    out.flush()?;
    csv.flush()?;
    eprintln!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs, threads: usize) -> AnyResult<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(p) = a.precision {
        cfg.spec.precision = p.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let opts = ScanOptions { workers: threads, ..Default::default() };
    let data = cfg.data.generate()?;
    if let Some(p) = &a.save_data {
        data.to_container(&cfg.data).save(p)?;
    }
    let mut log = Ldjson::append(&a.log)?;
    log.record("config", json!({ "command": "train", "config": cfg.entries(), "threads": threads }))?;
    log.record("environment", environment(threads, cfg.spec.precision))?;
    log.flush()?;
    let outputs = TrainOutputs { checkpoint: Some(a.checkpoint.clone()), log: Some(a.log.clone()) };
    let resume = a.resume.as_deref().map(Container::load).transpose()?;
    let summary = match (cfg.spec.precision, cfg.model) {
        (Precision::F32, ModelKind::ConvS5) => train_typed(cfg.clone(), build_convs5::<f32>(&cfg)?, opts, &data, &outputs, resume.as_ref()),
        (Precision::F64, ModelKind::ConvS5) => train_typed(cfg.clone(), build_convs5::<f64>(&cfg)?, opts, &data, &outputs, resume.as_ref()),
        (Precision::F32, ModelKind::ConvRnn) => train_typed(cfg.clone(), build_convrnn::<f32>(&cfg)?, opts, &data, &outputs, resume.as_ref()),
        (Precision::F64, ModelKind::ConvRnn) => train_typed(cfg.clone(), build_convrnn::<f64>(&cfg)?, opts, &data, &outputs, resume.as_ref()),
    };
    let mut log = Ldjson::append(&a.log)?;
    match summary {
        Ok(s) => {
            log.record("summary", &s)?;
            log.flush()?;
            eprintln!(
                "{} steps in {:.1}s; rollout MSE {:.5} (PSNR {:.2} dB) vs copy-last {:.5}; checkpoint {}",
                s.steps_run,
                s.wall_s,
                s.eval.rollout.mse,
                s.eval.rollout.psnr,
                s.eval.copy_last.mse,
                a.checkpoint.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            log.record("abort", json!({ "error": e.to_string() }))?;
            log.flush()?;
            Err(e.into())
        }
    }
}

fn train_typed<T: Real, L: SeqLayer<T>>(
    cfg: TrainConfig,
    model: Stack<T, L>,
    opts: ScanOptions,
    data: &convssm::data::Dataset,
    out: &TrainOutputs,
    resume: Option<&Container>,
) -> convssm::Result<convssm::train::TrainSummary> {
    let mut t = Trainer::new(cfg, model, opts);
    if let Some(c) = resume {
        t.restore(c)?;
    }
    t.run(data, out)
}

fn rollout(a: RolloutArgs, threads: usize) -> AnyResult<ExitCode> {
    let ckpt = Container::load(&a.checkpoint)?;
    let info = CheckpointInfo::read(&ckpt)?;
    let data = info.data.generate()?;
    let opts = ScanOptions { workers: threads, ..Default::default() };
    let mut report = Ldjson::open(a.report.as_deref())?;
    report.record(
        "config",
        json!({
            "command": "rollout",
            "checkpoint": a.checkpoint,
            "model": info.model.name(),
            "checkpoint_step": info.step,
            "context": a.context,
            "horizon": a.horizon,
            "sample": a.sample,
            "threads": threads,
        }),
    )?;
    report.record("environment", environment(threads, info.spec.precision))?;
    let cfg = info.train_config();
    let mut out = Container::new();
    let summary = match (info.spec.precision, info.model) {
        (Precision::F32, ModelKind::ConvS5) => rollout_typed::<f32, _>(build_convs5(&cfg)?, &ckpt, &data, &a, &opts, &mut report, &mut out)?,
        (Precision::F64, ModelKind::ConvS5) => rollout_typed::<f64, _>(build_convs5(&cfg)?, &ckpt, &data, &a, &opts, &mut report, &mut out)?,
        (Precision::F32, ModelKind::ConvRnn) => rollout_typed::<f32, _>(build_convrnn(&cfg)?, &ckpt, &data, &a, &opts, &mut report, &mut out)?,
        (Precision::F64, ModelKind::ConvRnn) => rollout_typed::<f64, _>(build_convrnn(&cfg)?, &ckpt, &data, &a, &opts, &mut report, &mut out)?,
    };
    report.record("summary", &summary)?;
    report.flush()?;
    out.save(&a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn rollout_typed<T: Real + Storable, L: SeqLayer<T>>(
    mut model: Stack<T, L>,
    ckpt: &Container,
    data: &convssm::data::Dataset,
    a: &RolloutArgs,
    opts: &ScanOptions,
    report: &mut Ldjson,
    out: &mut Container,
) -> AnyResult<Value> {
    load_params(&mut model, ckpt)?;
    let r = run_rollout(&model, &data.test, a.sample, a.context, a.horizon, opts)?;
    for (k, ms) in r.step_ms.iter().enumerate() {
        let m = r.per_step.get(k);
        report.record(
            "step",
            json!({ "step": k, "wall_ms": ms, "mse": m.map(|m| m.mse), "psnr": m.map(|m| m.psnr) }),
        )?;
    }
    out.push_tensor("rollout.context", &r.context);
    out.push_tensor("rollout.generated", &r.generated);
    let med = |lo: usize, hi: usize| {
        let mut w: Vec<f64> = r.step_ms.get(lo..hi.min(r.step_ms.len())).unwrap_or(&[]).to_vec();
        (!w.is_empty()).then(|| median(&mut w))
    };
    let mean_psnr = (!r.per_step.is_empty()).then(|| r.per_step.iter().map(|m| m.psnr).sum::<f64>() / r.per_step.len() as f64);
    let mean_mse = (!r.per_step.is_empty()).then(|| r.per_step.iter().map(|m| m.mse).sum::<f64>() / r.per_step.len() as f64);
    Ok(json!({
        "generated_frames": r.step_ms.len(),
        "frames_with_truth": r.per_step.len(),
        "mean_mse": mean_mse,
        "mean_psnr": mean_psnr,
        "psnr_cap": PSNR_CAP,
        "median_step_ms_around_10": med(5, 16),
        "median_step_ms_around_200": med(195, 206),
    }))
}

fn info(a: InfoArgs, threads: usize) -> AnyResult<ExitCode> {
    let Some(path) = a.file else {
        let defaults = TrainConfig::default();
        println!("convssm {}", env!("CARGO_PKG_VERSION"));
        println!("threads: {threads} (available {}, {THREADS_ENV} overrides --threads)", std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
        println!("default training config:");
        print!("{}", defaults.to_text().lines().map(|l| format!("  {l}\n")).collect::<String>());
        let s5 = ConvS5Model::<f32>::init(&defaults.spec, 0)?;
        let rnn: ConvRnnModel<f32> = build_convrnn(&defaults)?;
        println!("default ConvS5 parameters: {}", s5.param_count());
        println!("matched ConvRNN parameters: {} (hidden {})", rnn.param_count(), rnn.spec.p);
        println!("verify suites: prop1 prop3 gradient discretization all");
        println!("bench methods: convs5-par convs5-seq convrnn");
        return Ok(ExitCode::SUCCESS);
    };
    let c = Container::load(&path)?;
    println!("{}: {} entries", path.display(), c.entries.len());
    for e in &c.entries {
        let dtype = ["f32", "f64", "c64", "c128"][e.data.dtype() as usize];
        println!("  {:<32} {:<5} {:?}", e.name, dtype, e.dims);
    }
    if let Ok(info) = CheckpointInfo::read(&c) {
        println!("checkpoint: {} at step {}, {:?}", info.model.name(), info.step, info.spec);
    }
    Ok(ExitCode::SUCCESS)
}
