//! Next-frame training on bouncing blobs: flat key=value configuration,
//! the training loop, held-out rollout evaluation, and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::container::Container;
use crate::data::{gather, metrics, BouncingBlobConfig, Dataset, Metrics};
use crate::error::{Error, Result};
use crate::grad::{adam_step, freeze_mask, AdamConfig, AdamState};
use crate::model::{load_params, ConvRnnModel, ConvS5Model, ModelSpec, Precision, SeqLayer, Stack};
use crate::nn::{ActivationKind, Loss, Params};
use crate::scalar::Real;
use crate::scan::ScanOptions;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    ConvS5,
    ConvRnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ConvS5 => "convs5",
            ModelKind::ConvRnn => "convrnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub spec: ModelSpec,
    pub data: BouncingBlobConfig,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub loss: Loss,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub context: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Stop after this many seconds of training (0 disables).
    pub time_budget_s: f64,
    /// Parameter-name substrings whose tensors stay at their initial values.
    pub freeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::ConvS5,
            spec: ModelSpec::default(),
            data: BouncingBlobConfig::default(),
            steps: 2000,
            batch: 1,
            lr: 3e-3,
            warmup: 100,
            weight_decay: 0.0,
            loss: Loss::L1L2,
            eval_every: 500,
            eval_samples: 32,
            context: 20,
            horizon: 20,
            seed: 0,
            time_budget_s: 0.0,
            freeze: Vec::new(),
        }
    }
}

fn parse_num<F: std::str::FromStr>(key: &str, v: &str) -> Result<F> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl TrainConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(format!("{key}: {e}"));
        match key {
            "model" => {
                self.model = match v {
                    "convs5" => ModelKind::ConvS5,
                    "convrnn" => ModelKind::ConvRnn,
                    _ => return Err(Error::Config(format!("model: unknown kind {v:?}"))),
                }
            }
            "layers" => self.spec.layers = parse_num(key, v)?,
            "p" => self.spec.p = parse_num(key, v)?,
            "u" => self.spec.u = parse_num(key, v)?,
            "kb" => self.spec.kb = parse_num(key, v)?,
            "kc" => self.spec.kc = parse_num(key, v)?,
            "use_d" => self.spec.use_d = parse_bool(key, v)?,
            "activation" => self.spec.activation = ActivationKind::parse(v).map_err(cfg_err)?,
            "precision" => self.spec.precision = Precision::parse(v).map_err(cfg_err)?,
            "dt_min" => self.spec.dt_min = parse_num(key, v)?,
            "dt_max" => self.spec.dt_max = parse_num(key, v)?,
            "grid" => self.data.grid = parse_num(key, v)?,
            "blob" => self.data.blob = parse_num(key, v)?,
            "blobs" => self.data.blobs = parse_num(key, v)?,
            "speed_min" => self.data.speed_min = parse_num(key, v)?,
            "speed_max" => self.data.speed_max = parse_num(key, v)?,
            "seq_len" => self.data.seq_len = parse_num(key, v)?,
            "train_samples" => self.data.train_samples = parse_num(key, v)?,
            "test_samples" => self.data.test_samples = parse_num(key, v)?,
            "data_seed" => self.data.seed = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "warmup" => self.warmup = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "loss" => self.loss = Loss::parse(v).map_err(cfg_err)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "eval_samples" => self.eval_samples = parse_num(key, v)?,
            "context" => self.context = parse_num(key, v)?,
            "horizon" => self.horizon = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "time_budget_s" => self.time_budget_s = parse_num(key, v)?,
            "freeze" => self.freeze = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch == 0 || self.batch > self.data.train_samples {
            return Err(Error::Config(format!("batch {} must be in 1..={}", self.batch, self.data.train_samples)));
        }
        if self.context == 0 || self.context + self.horizon > self.data.seq_len {
            return Err(Error::Config(format!(
                "context {} + horizon {} must fit in seq_len {}",
                self.context, self.horizon, self.data.seq_len
            )));
        }
        if self.data.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` text; parsing it reproduces this config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let s = &self.spec;
        let d = &self.data;
        BTreeMap::from([
            ("model", self.model.name().to_string()),
            ("layers", s.layers.to_string()),
            ("p", s.p.to_string()),
            ("u", s.u.to_string()),
            ("kb", s.kb.to_string()),
            ("kc", s.kc.to_string()),
            ("use_d", s.use_d.to_string()),
            ("activation", s.activation.name().to_string()),
            ("precision", s.precision.name().to_string()),
            ("dt_min", s.dt_min.to_string()),
            ("dt_max", s.dt_max.to_string()),
            ("grid", d.grid.to_string()),
            ("blob", d.blob.to_string()),
            ("blobs", d.blobs.to_string()),
            ("speed_min", d.speed_min.to_string()),
            ("speed_max", d.speed_max.to_string()),
            ("seq_len", d.seq_len.to_string()),
            ("train_samples", d.train_samples.to_string()),
            ("test_samples", d.test_samples.to_string()),
            ("data_seed", d.seed.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("loss", self.loss.name().to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("context", self.context.to_string()),
            ("horizon", self.horizon.to_string()),
            ("seed", self.seed.to_string()),
            ("time_budget_s", self.time_budget_s.to_string()),
            ("freeze", self.freeze.join(",")),
        ])
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            warmup_steps: self.warmup,
            total_steps: self.steps,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// ConvRNN hidden width whose parameter count is closest to a ConvS5 stack
/// with the same spec.
pub fn matched_rnn_hidden(spec: &ModelSpec) -> Result<usize> {
    let target = ConvS5Model::<f32>::init(spec, 0)?.param_count() as i64;
    let mut best = (i64::MAX, 1);
    for h in 1..=4 * spec.p.max(4) {
        let s = ModelSpec { p: h, ..spec.clone() };
        let n = ConvRnnModel::<f32>::init(&s, 0)?.param_count() as i64;
        if (n - target).abs() < best.0 {
            best = ((n - target).abs(), h);
        }
    }
    Ok(best.1)
}

/// Held-out rollout quality, and the copy-last-frame reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RolloutEval {
    pub rollout: Metrics,
    pub copy_last: Metrics,
}

/// Condition on `context` frames of each test sequence and generate
/// `horizon` frames autoregressively. Also returns the MSE of each step.
pub fn evaluate_rollout<T: Real, L: SeqLayer<T>>(
    model: &Stack<T, L>,
    test: &Tensor<f64>,
    samples: usize,
    context: usize,
    horizon: usize,
    opts: &ScanOptions,
) -> Result<(RolloutEval, Vec<f64>)> {
    let n = samples.min(test.shape()[1]);
    let idx: Vec<usize> = (0..n).collect();
    let seqs: Tensor<T> = gather(test, &idx)?;
    let ctx = seqs.slice0(0, context);
    let truth = seqs.slice0(context, context + horizon);
    let (gen, _) = model.autoregress(&ctx, horizon, opts)?;
    let last = ctx.index0(context - 1);
    let copy: Vec<T> = (0..horizon).flat_map(|_| last.data().iter().copied()).collect();
    let step = truth.len() / horizon.max(1);
    let per_step = (0..horizon)
        .map(|k| metrics(&gen.data()[k * step..(k + 1) * step], &truth.data()[k * step..(k + 1) * step]).mse)
        .collect();
    Ok((
        RolloutEval { rollout: metrics(gen.data(), truth.data()), copy_last: metrics(&copy, truth.data()) },
        per_step,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub record: &'static str,
    pub model: &'static str,
    pub step: u64,
    pub train_loss: f64,
    pub rollout_mse: f64,
    pub rollout_psnr: f64,
    pub copy_last_mse: f64,
    pub copy_last_psnr: f64,
    pub elapsed_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub model: &'static str,
    pub steps_run: u64,
    pub final_step: u64,
    pub params: usize,
    pub wall_s: f64,
    pub final_loss: f64,
    pub eval: RolloutEval,
}

/// Where training writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Training state: model, optimizer, and step counter.
pub struct Trainer<T: Real, L: SeqLayer<T>> {
    pub cfg: TrainConfig,
    pub model: Stack<T, L>,
    pub adam: AdamState<T>,
    pub opts: ScanOptions,
    frozen: Option<Vec<bool>>,
}

impl<T: Real, L: SeqLayer<T>> Trainer<T, L> {
    pub fn new(cfg: TrainConfig, model: Stack<T, L>, opts: ScanOptions) -> Self {
        let n = model.param_count();
        let patterns: Vec<&str> = cfg.freeze.iter().map(String::as_str).collect();
        let frozen = if patterns.is_empty() { None } else { Some(freeze_mask(&model, &patterns)) };
        Self { cfg, model, adam: AdamState::new(n), opts, frozen }
    }

    /// Batch indices for a given step depend only on (seed, step).
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_ba7c);
        rng.set_stream(step);
        sample(&mut rng, self.cfg.data.train_samples, self.cfg.batch).into_vec()
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self, data: &Dataset, adam: &AdamConfig) -> Result<f64> {
        let idx = self.batch_indices(self.adam.step);
        let batch: Tensor<T> = gather(&data.train, &idx)?;
        let (loss, grad) = self.model.loss_and_grad(&batch, self.cfg.loss, &self.opts)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { layer: usize::MAX, step: self.adam.step as usize });
        }
        let g = grad.flat();
        if let Some(bad) = grad.layout().into_iter().find(|(_, off, len)| g[*off..off + len].iter().any(|v| !v.as_f64().is_finite())) {
            return Err(Error::NonFiniteGrad(bad.0));
        }
        let mut w = self.model.flat();
        adam_step(&mut w, &g, &mut self.adam, adam, self.frozen.as_deref());
        self.model.set_flat(&w);
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Container {
        let mut c = Container::new();
        self.model.spec.to_container(&mut c);
        self.cfg.data.to_container(&mut c);
        let mut named = Vec::new();
        self.model.params("", &mut named);
        for (name, data) in named {
            c.push_real(format!("param.{name}"), &[data.len()], data);
        }
        self.adam.to_container(&mut c);
        c.push_scalar("manifest.model_kind", if self.cfg.model == ModelKind::ConvRnn { 1.0 } else { 0.0 });
        c
    }

    pub fn restore(&mut self, c: &Container) -> Result<()> {
        let spec = ModelSpec::from_container(c)?;
        if spec != self.model.spec {
            return Err(Error::Format(format!("checkpoint model {spec:?} does not match the configured {:?}", self.model.spec)));
        }
        load_params(&mut self.model, c)?;
        let adam = AdamState::from_container(c)?;
        if adam.m.len() != self.adam.m.len() {
            return Err(Error::Format("optimizer state does not match the model".into()));
        }
        self.adam = adam;
        Ok(())
    }

    /// Train until `cfg.steps` (or the time budget), evaluating every
    /// `eval_every` steps and at the end.
    pub fn run(&mut self, data: &Dataset, out: &TrainOutputs) -> Result<TrainSummary> {
        let mut log = match &out.log {
            Some(p) => Some(std::io::BufWriter::new(std::fs::OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        let mut adam = self.cfg.adam();
        let start = Instant::now();
        let first = self.adam.step;
        let mut last_loss = f64::NAN;
        let mut recent = Vec::new();
        while self.adam.step < adam.total_steps {
            let loss = match self.step(data, &adam) {
                Ok(l) => l,
                Err(e) => {
                    if let Some(l) = log.as_mut() {
                        l.flush()?;
                    }
                    return Err(e);
                }
            };
            last_loss = loss;
            recent.push(loss);
            let done = self.adam.step - first;
            if self.cfg.time_budget_s > 0.0 {
                let elapsed = start.elapsed().as_secs_f64();
                if done % 10 == 0 {
                    // fit the schedule to the steps the budget allows, re-projected
                    // as the step-time estimate improves
                    let projected = (self.cfg.time_budget_s / (elapsed / done as f64)) as u64 + first;
                    adam.total_steps = self.cfg.steps.min(projected.max(self.adam.step));
                }
                if elapsed >= self.cfg.time_budget_s {
                    break;
                }
            }
            if self.cfg.eval_every > 0 && self.adam.step % self.cfg.eval_every == 0 && self.adam.step < adam.total_steps {
                let rec = self.eval_record(data, &recent, start)?;
                recent.clear();
                if let Some(l) = log.as_mut() {
                    writeln!(l, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
                }
                if let Some(p) = &out.checkpoint {
                    self.checkpoint().save(p)?;
                }
            }
        }
        let rec = self.eval_record(data, &recent, start)?;
        if let Some(l) = log.as_mut() {
            writeln!(l, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
            l.flush()?;
        }
        if let Some(p) = &out.checkpoint {
            self.checkpoint().save(p)?;
        }
        let (eval, _) = self.evaluate(data)?;
        Ok(TrainSummary {
            model: self.cfg.model.name(),
            steps_run: self.adam.step - first,
            final_step: self.adam.step,
            params: self.model.param_count(),
            wall_s: start.elapsed().as_secs_f64(),
            final_loss: last_loss,
            eval,
        })
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<(RolloutEval, Vec<f64>)> {
        evaluate_rollout(&self.model, &data.test, self.cfg.eval_samples, self.cfg.context, self.cfg.horizon, &self.opts)
    }

    fn eval_record(&self, data: &Dataset, recent: &[f64], start: Instant) -> Result<EvalRecord> {
        let (e, _) = self.evaluate(data)?;
        Ok(EvalRecord {
            record: "eval",
            model: self.cfg.model.name(),
            step: self.adam.step,
            train_loss: if recent.is_empty() { f64::NAN } else { recent.iter().sum::<f64>() / recent.len() as f64 },
            rollout_mse: e.rollout.mse,
            rollout_psnr: e.rollout.psnr,
            copy_last_mse: e.copy_last.mse,
            copy_last_psnr: e.copy_last.psnr,
            elapsed_s: start.elapsed().as_secs_f64(),
        })
    }
}

/// Build the model a config describes (ConvRNN width parameter-matched).
pub fn build_convs5<T: Real>(cfg: &TrainConfig) -> Result<ConvS5Model<T>> {
    ConvS5Model::init(&cfg.spec, cfg.seed)
}

pub fn build_convrnn<T: Real>(cfg: &TrainConfig) -> Result<ConvRnnModel<T>> {
    let hidden = matched_rnn_hidden(&cfg.spec)?;
    ConvRnnModel::init(&ModelSpec { p: hidden, ..cfg.spec.clone() }, cfg.seed)
}

/// What a checkpoint says about the run that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub model: ModelKind,
    pub spec: ModelSpec,
    pub data: BouncingBlobConfig,
    pub step: u64,
}

impl CheckpointInfo {
    pub fn read(c: &Container) -> Result<Self> {
        let model = match c.scalar("manifest.model_kind")? as u8 {
            0 => ModelKind::ConvS5,
            1 => ModelKind::ConvRnn,
            k => return Err(Error::Format(format!("unknown model kind {k}"))),
        };
        Ok(Self {
            model,
            spec: ModelSpec::from_container(c)?,
            data: BouncingBlobConfig::from_container(c)?,
            step: c.scalar("adam.step")? as u64,
        })
    }

    /// A training config that rebuilds this checkpoint's model and data.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { model: self.model, spec: self.spec.clone(), data: self.data.clone(), ..TrainConfig::default() }
    }
}

/// Generated frames plus per-step timing and error against held-out truth.
#[derive(Clone, Debug)]
pub struct Rollout<T> {
    /// `[context, 1, H, W, C]`
    pub context: Tensor<T>,
    /// `[horizon, 1, H, W, C]`
    pub generated: Tensor<T>,
    /// Wall time of each generation step; step 0 includes the context pass.
    pub step_ms: Vec<f64>,
    /// Per-step metrics for steps with ground truth in the test sequence.
    pub per_step: Vec<Metrics>,
}

/// Condition on the first `context` frames of test sequence `sample` and
/// generate `horizon` frames.
pub fn run_rollout<T: Real, L: SeqLayer<T>>(
    model: &Stack<T, L>,
    test: &Tensor<f64>,
    sample: usize,
    context: usize,
    horizon: usize,
    opts: &ScanOptions,
) -> Result<Rollout<T>> {
    let s = test.shape();
    if sample >= s[1] {
        return Err(Error::Config(format!("sample {sample} out of range (test split has {})", s[1])));
    }
    if context == 0 || context > s[0] {
        return Err(Error::Config(format!("context must be in 1..={}", s[0])));
    }
    let seq: Tensor<T> = gather(test, &[sample])?;
    let ctx = seq.slice0(0, context);
    let (generated, times) = model.autoregress(&ctx, horizon, opts)?;
    let known = horizon.min(s[0] - context);
    let frame = generated.len() / horizon.max(1);
    let per_step = (0..known)
        .map(|k| {
            let truth = seq.index0(context + k);
            metrics(&generated.data()[k * frame..(k + 1) * frame], truth.data())
        })
        .collect();
    Ok(Rollout {
        context: ctx,
        generated,
        step_ms: times.iter().map(|d| d.as_secs_f64() * 1e3).collect(),
        per_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        let mut c = TrainConfig::parse(
            "layers = 1\np = 4\nu = 3\ngrid = 6\nseq_len = 6\ntrain_samples = 6\ntest_samples = 2\n\
             steps = 6\nbatch = 2\ncontext = 3\nhorizon = 3\neval_every = 0\nwarmup = 2\nprecision = f64\n",
        )
        .unwrap();
        c.eval_samples = 2;
        c
    }

    #[test]
    fn config_text_roundtrip() {
        let c = tiny();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("layers 2").is_err());
        assert!(TrainConfig::parse("kb = 2").is_err());
    }

    #[test]
    fn zero_steps_keeps_initial_model() {
        let mut c = tiny();
        c.steps = 0;
        let data = c.data.generate().unwrap();
        let model = build_convs5::<f64>(&c).unwrap();
        let init = model.clone();
        let mut t = Trainer::new(c, model, ScanOptions::default());
        let s = t.run(&data, &TrainOutputs::default()).unwrap();
        assert_eq!(s.steps_run, 0);
        assert_eq!(t.model, init);
        let (e, _) = evaluate_rollout(&init, &data.test, 2, 3, 3, &ScanOptions::default()).unwrap();
        assert_eq!(s.eval, e);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let c = tiny();
        let data = c.data.generate().unwrap();
        let mut full = Trainer::new(c.clone(), build_convs5::<f64>(&c).unwrap(), ScanOptions::default());
        full.run(&data, &TrainOutputs::default()).unwrap();

        let mut half_cfg = c.clone();
        half_cfg.steps = 3;
        let mut first = Trainer::new(half_cfg, build_convs5::<f64>(&c).unwrap(), ScanOptions::default());
        // the schedule must be the full run's, so stop by stepping manually
        let adam = c.adam();
        for _ in 0..3 {
            first.step(&data, &adam).unwrap();
        }
        let ckpt = Container::from_bytes(&first.checkpoint().to_bytes()).unwrap();
        let mut resumed = Trainer::new(c.clone(), build_convs5::<f64>(&c).unwrap(), ScanOptions::default());
        resumed.restore(&ckpt).unwrap();
        resumed.run(&data, &TrainOutputs::default()).unwrap();
        assert_eq!(resumed.model.flat(), full.model.flat());
    }

    #[test]
    fn frozen_tensors_stay_put() {
        let mut c = tiny();
        c.freeze = vec!["dyn.".into()];
        let data = c.data.generate().unwrap();
        let mut t = Trainer::new(c.clone(), build_convs5::<f64>(&c).unwrap(), ScanOptions::default());
        let before = t.model.layers[0].dynamics.clone();
        t.run(&data, &TrainOutputs::default()).unwrap();
        assert_eq!(t.model.layers[0].dynamics, before);
        assert_ne!(t.model.layers[0].c_kernel, build_convs5::<f64>(&c).unwrap().layers[0].c_kernel);
    }

    #[test]
    fn rnn_width_is_parameter_matched() {
        let spec = ModelSpec::default();
        let h = matched_rnn_hidden(&spec).unwrap();
        let a = ConvS5Model::<f32>::init(&spec, 0).unwrap().param_count() as f64;
        let b = ConvRnnModel::<f32>::init(&ModelSpec { p: h, ..spec }, 0).unwrap().param_count() as f64;
        assert!((a - b).abs() / a < 0.1, "{a} vs {b} (hidden {h})");
    }

    #[test]
    fn checkpoint_describes_its_run() {
        let c = tiny();
        let data = c.data.generate().unwrap();
        let mut t = Trainer::new(c.clone(), build_convs5::<f64>(&c).unwrap(), ScanOptions::default());
        t.step(&data, &c.adam()).unwrap();
        let info = CheckpointInfo::read(&t.checkpoint()).unwrap();
        assert_eq!(info.model, ModelKind::ConvS5);
        assert_eq!(info.spec, c.spec);
        assert_eq!(info.data, c.data);
        assert_eq!(info.step, 1);
        let mut other = c.clone();
        other.spec.p = 6;
        let mut wrong = Trainer::new(other.clone(), build_convs5::<f64>(&other).unwrap(), ScanOptions::default());
        assert!(wrong.restore(&t.checkpoint()).is_err());
    }

    #[test]
    fn rollout_is_deterministic_and_echoes_context() {
        let c = tiny();
        let data = c.data.generate().unwrap();
        let model = build_convs5::<f64>(&c).unwrap();
        let opts = ScanOptions::default();
        let a = run_rollout(&model, &data.test, 1, 3, 5, &opts).unwrap();
        let b = run_rollout(&model, &data.test, 1, 3, 5, &opts).unwrap();
        assert_eq!(a.generated, b.generated);
        assert_eq!(a.step_ms.len(), 5);
        // the test sequence has 6 frames, so only 3 generated steps have truth
        assert_eq!(a.per_step.len(), 3);
        assert_eq!(a.context, gather::<f64>(&data.test, &[1]).unwrap().slice0(0, 3));
        let z = run_rollout(&model, &data.test, 1, 3, 0, &opts).unwrap();
        assert_eq!(z.generated.shape()[0], 0);
        assert!(z.per_step.is_empty() && z.step_ms.is_empty());
        assert_eq!(z.context, a.context);
        assert!(run_rollout(&model, &data.test, 5, 3, 1, &opts).is_err());
    }
}
