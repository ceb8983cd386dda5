//! Training loops for the three pipeline phases: pretraining with a range
//! regularizer, quantization-aware training, and palettized compression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analytics::layer_stats;
use crate::config::{ExperimentConfig, ScheduleKind, TrainConfig};
use crate::data_io::{config_hash, Checkpoint, Dataset};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Architecture, ForwardHooks, Model};
use crate::palettizers::{
    dkm_on_tape, group_weights, kmeans_fit, size_report, validate_spec, Compression, Palette,
    SizeReport,
};
use crate::quantizers::{
    fake_quant_on_tape, fake_quant_weight, init_step_statistical, on_grid, pact_clip,
    pact_on_tape, pact_quantize, LayerQuant, QuantMethod, QuantState, DEGENERATE_STEP,
};
use crate::regularizers::{reg_on_tape, LayerReg, RegKind, RegState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smallest PACT clip kept after an optimizer step.
pub const MIN_ACT_CLIP: f64 = 1e-3;

// ---------------------------------------------------------------- optimizer

/// One Nesterov/heavy-ball SGD update in the PyTorch formulation:
/// `g = grad + wd·p; v = μ·v + g; p -= lr·(g + μ·v)` (Nesterov) or
/// `p -= lr·v` (plain momentum).
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    nesterov: bool,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd: {} params, {} grads, {} velocity slots",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let d = g + weight_decay * *p;
        *v = momentum * *v + d;
        let step = if nesterov { d + momentum * *v } else { *v };
        *p -= lr * step;
    }
    Ok(())
}

/// Velocity buffers keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, nesterov: bool) -> Self {
        Sgd { momentum, weight_decay, nesterov, velocity: BTreeMap::new() }
    }

    pub fn from_config(t: &TrainConfig) -> Self {
        Sgd::new(t.momentum, t.weight_decay, t.nesterov)
    }

    /// Updates `param`; `decay` selects whether weight decay applies.
    pub fn step(&mut self, key: &str, param: &mut [f64], grad: &[f64], lr: f64, decay: bool) -> Result<()> {
        let v = self.velocity.entry(key.to_string()).or_insert_with(|| vec![0.0; param.len()]);
        let wd = if decay { self.weight_decay } else { 0.0 };
        sgd_step(param, grad, v, lr, self.momentum, wd, self.nesterov)
            .map_err(|e| Error::Shape(format!("{key}: {e}")))
    }

    /// Updates a single learnable scalar without weight decay.
    pub fn step_scalar(&mut self, key: &str, value: f64, grad: f64, lr: f64) -> Result<f64> {
        let mut p = [value];
        self.step(key, &mut p, &[grad], lr, false)?;
        Ok(p[0])
    }
}

/// Learning rate at optimizer step `step` of `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, steps_per_epoch: usize, base_lr: f64, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        ScheduleKind::Constant => base_lr,
        ScheduleKind::Cosine => {
            let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
            0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
        }
        ScheduleKind::Step => {
            let epoch = step / steps_per_epoch.max(1);
            base_lr * cfg.gamma.powi((epoch / cfg.step_epochs.max(1)) as i32)
        }
    }
}

// ------------------------------------------------------------------ records

/// Per-layer weight statistics logged each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: String,
    pub range: f64,
    pub std: f64,
    pub kurtosis: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    /// Unweighted regularizer value (no λ) at the end of the epoch.
    pub reg_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub layers: Vec<LayerRecord>,
}

/// Metrics as CSV: a header row, then one row per epoch.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,task_loss,reg_loss,train_accuracy,test_accuracy");
    if let Some(first) = records.first() {
        for l in &first.layers {
            out.push_str(&format!(",{0}_range,{0}_std,{0}_kurtosis", l.layer));
        }
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.epoch, r.lr, r.task_loss, r.reg_loss, r.train_accuracy, r.test_accuracy
        ));
        for l in &r.layers {
            let k = l.kurtosis.map_or(String::new(), |k| k.to_string());
            out.push_str(&format!(",{},{},{}", l.range, l.std, k));
        }
        out.push('\n');
    }
    out
}

fn layer_records(model: &Model) -> Result<Vec<LayerRecord>> {
    model
        .weights()
        .into_iter()
        .map(|(name, w)| {
            let s = layer_stats(name, w.data())?;
            Ok(LayerRecord { layer: name.to_string(), range: s.range, std: s.std, kurtosis: s.kurtosis })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    pub params: usize,
    pub range: f64,
    pub std: f64,
    pub kurtosis: Option<f64>,
    /// Distinct values among the evaluated weights.
    pub distinct_values: usize,
    pub bits: Option<u32>,
    pub step: Option<f64>,
    pub act_clip: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub phase: String,
    pub architecture: String,
    pub seed: u64,
    pub config_hash: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub reg_kind: String,
    /// Test accuracy of the starting checkpoint at full precision.
    pub init_test_accuracy: Option<f64>,
    /// Test accuracy of the final (quantized / palettized) model.
    pub final_test_accuracy: f64,
    pub final_task_loss: f64,
    pub std_convention: String,
    pub layers: Vec<LayerSummary>,
    pub size_report: Option<SizeReport>,
    pub warnings: Vec<String>,
}

pub struct RunOutput {
    pub checkpoint: Checkpoint,
    /// The model as evaluated (hard-quantized or palettized weights).
    pub eval_model: Model,
    pub metrics: Vec<EpochRecord>,
    pub summary: Summary,
}

/// Seed and parallelism of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// Worker threads for evaluation; 1 is the reference mode.
    pub threads: usize,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        RunOptions { seed, threads: 1 }
    }
}

// --------------------------------------------------------------- evaluation

/// Activation transform used at evaluation: PACT clip and optional
/// quantization after the ReLU following each listed layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalHooks {
    pub act: BTreeMap<String, (f64, Option<u32>)>,
}

impl ForwardHooks for EvalHooks {
    fn activation(&mut self, tape: &mut Tape, layer: &str, x: Var) -> Result<Var> {
        let Some(&(clip, bits)) = self.act.get(layer) else {
            return Ok(x);
        };
        let xv = tape.value(x);
        let data = match bits {
            Some(b) => pact_quantize(xv.data(), clip, b)?,
            None => pact_clip(xv.data(), &vec![0.0; xv.numel()], clip)?.0,
        };
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        tape.constant(t)
    }
}

/// Test accuracy. Batches may be evaluated on several threads; counts are
/// reduced in batch order so the result does not depend on `threads`.
pub fn evaluate(model: &Model, data: &Dataset, hooks: &EvalHooks, batch_size: usize, threads: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch_size.max(1)).collect();
    let count = |chunk: &[usize]| -> Result<usize> {
        let (x, y) = data.batch(chunk)?;
        let logits = model.logits(&x, &mut hooks.clone())?;
        Ok(argmax_rows(&logits).iter().zip(&y).filter(|(p, t)| p == t).count())
    };
    let counts: Vec<Result<usize>> = if threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(|c| count(c)).collect())
    } else {
        chunks.iter().map(|c| count(c)).collect()
    };
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / data.len() as f64)
}

// ------------------------------------------------------------------- phases

/// Phase-specific behaviour plugged into the shared training loop.
trait Phase: ForwardHooks {
    /// Puts the phase's learnable scalars on a fresh tape.
    fn register(&mut self, tape: &mut Tape) -> Result<()>;
    /// Extra loss term (already weighted), if any.
    fn penalty(&mut self, _tape: &mut Tape, _weights: &[(String, Var)]) -> Result<Option<Var>> {
        Ok(None)
    }
    /// Applies the optimizer to the phase's own parameters.
    fn update(&mut self, tape: &Tape, sgd: &mut Sgd, lr: f64) -> Result<()>;
    /// Unweighted regularizer value for logging.
    fn reg_metric(&self, _model: &Model) -> Result<f64> {
        Ok(0.0)
    }
    /// The model as it is evaluated and deployed.
    fn eval_model(&self, model: &Model) -> Result<Model>;
    fn eval_hooks(&self) -> EvalHooks {
        EvalHooks::default()
    }
}

struct RegPhase {
    state: RegState,
    vars: BTreeMap<String, Var>,
}

impl ForwardHooks for RegPhase {}

impl Phase for RegPhase {
    fn register(&mut self, tape: &mut Tape) -> Result<()> {
        self.vars.clear();
        if !self.state.is_active() {
            return Ok(());
        }
        for (name, reg) in &self.state.per_layer {
            if let Some(p) = reg.param() {
                self.vars.insert(name.clone(), tape.param(Tensor::scalar(p))?);
            }
        }
        Ok(())
    }

    fn penalty(&mut self, tape: &mut Tape, weights: &[(String, Var)]) -> Result<Option<Var>> {
        if !self.state.is_active() {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for (name, w) in weights {
            let r = reg_on_tape(tape, self.state.kind, *w, self.vars.get(name).copied())?;
            total = Some(match total {
                Some(t) => tape.add(t, r)?,
                None => r,
            });
        }
        match total {
            Some(t) => Ok(Some(tape.scale(t, self.state.lambda)?)),
            None => Ok(None),
        }
    }

    fn update(&mut self, tape: &Tape, sgd: &mut Sgd, lr: f64) -> Result<()> {
        for (name, var) in &self.vars {
            let g = tape.grad(*var).map_or(0.0, |g| g[0]);
            let reg = self.state.per_layer.get_mut(name).expect("registered layer");
            let p = reg.param().expect("registered parameter");
            let next = sgd.step_scalar(&format!("reg.{name}"), p, g, lr)?;
            reg.set_param(next);
        }
        Ok(())
    }

    fn reg_metric(&self, model: &Model) -> Result<f64> {
        if self.state.kind == RegKind::None {
            return Ok(0.0);
        }
        model.weights().into_iter().map(|(n, w)| self.state.layer_loss(n, w)).sum()
    }

    fn eval_model(&self, model: &Model) -> Result<Model> {
        Ok(model.clone())
    }
}

struct QuantPhase {
    state: QuantState,
    step_vars: BTreeMap<String, Var>,
    clip_vars: BTreeMap<String, Var>,
}

impl ForwardHooks for QuantPhase {
    fn weight(&mut self, tape: &mut Tape, layer: &str, w: Var) -> Result<Var> {
        let lq = &self.state.per_layer[layer];
        fake_quant_on_tape(tape, w, self.step_vars[layer], lq.bits, self.state.method, self.state.ewgs_delta)
    }

    fn activation(&mut self, tape: &mut Tape, layer: &str, x: Var) -> Result<Var> {
        match self.clip_vars.get(layer) {
            Some(&clip) => pact_on_tape(tape, x, clip, self.state.act_bits),
            None => Ok(x),
        }
    }
}

impl Phase for QuantPhase {
    fn register(&mut self, tape: &mut Tape) -> Result<()> {
        self.step_vars.clear();
        self.clip_vars.clear();
        let learn_step = self.state.method != QuantMethod::Ste;
        for (name, lq) in &self.state.per_layer {
            let s = Tensor::scalar(lq.step);
            let v = if learn_step { tape.param(s)? } else { tape.constant(s)? };
            self.step_vars.insert(name.clone(), v);
            if let Some(a) = lq.act_clip {
                self.clip_vars.insert(name.clone(), tape.param(Tensor::scalar(a))?);
            }
        }
        Ok(())
    }

    fn update(&mut self, tape: &Tape, sgd: &mut Sgd, lr: f64) -> Result<()> {
        let learn_step = self.state.method != QuantMethod::Ste;
        for (name, lq) in self.state.per_layer.iter_mut() {
            if learn_step {
                let g = tape.grad(self.step_vars[name]).map_or(0.0, |g| g[0]);
                let s = sgd.step_scalar(&format!("quant.{name}.step"), lq.step, g, lr)?;
                lq.step = s.max(DEGENERATE_STEP);
            }
            if let (Some(a), Some(&v)) = (lq.act_clip, self.clip_vars.get(name)) {
                let g = tape.grad(v).map_or(0.0, |g| g[0]);
                let next = sgd.step_scalar(&format!("quant.{name}.act_clip"), a, g, lr)?;
                lq.act_clip = Some(next.max(MIN_ACT_CLIP));
            }
        }
        Ok(())
    }

    fn eval_model(&self, model: &Model) -> Result<Model> {
        hard_quantize(model, &self.state)
    }

    fn eval_hooks(&self) -> EvalHooks {
        quant_eval_hooks(&self.state)
    }
}

/// Replaces every weight by its grid value and checks grid membership.
pub fn hard_quantize(model: &Model, state: &QuantState) -> Result<Model> {
    let mut out = model.clone();
    for (name, w) in out.weights_mut() {
        let lq = state
            .per_layer
            .get(name)
            .ok_or_else(|| Error::Config(format!("no quantizer state for layer {name}")))?;
        *w = fake_quant_weight(w, lq.bits, lq.step)?;
        if !on_grid(w.data(), lq.bits, lq.step)? {
            return Err(Error::Consistency(format!("{name}: evaluated weights are off the quantization grid")));
        }
    }
    Ok(out)
}

pub fn quant_eval_hooks(state: &QuantState) -> EvalHooks {
    EvalHooks {
        act: state
            .per_layer
            .iter()
            .filter_map(|(n, lq)| lq.act_clip.map(|a| (n.clone(), (a, state.act_bits))))
            .collect(),
    }
}

struct DkmLayer {
    bits: u32,
    dim: usize,
    tau: f64,
    codebook: Vec<f64>,
    pending: Option<Vec<f64>>,
}

struct DkmPhase {
    layers: BTreeMap<String, DkmLayer>,
}

impl ForwardHooks for DkmPhase {
    fn weight(&mut self, tape: &mut Tape, layer: &str, w: Var) -> Result<Var> {
        let l = self.layers.get_mut(layer).expect("palette for every layer");
        let (v, next) = dkm_on_tape(tape, w, &l.codebook, l.dim, l.tau)?;
        l.pending = Some(next);
        Ok(v)
    }
}

impl Phase for DkmPhase {
    fn register(&mut self, _tape: &mut Tape) -> Result<()> {
        Ok(())
    }

    fn update(&mut self, _tape: &Tape, _sgd: &mut Sgd, _lr: f64) -> Result<()> {
        for l in self.layers.values_mut() {
            if let Some(c) = l.pending.take() {
                l.codebook = c;
            }
        }
        Ok(())
    }

    fn eval_model(&self, model: &Model) -> Result<Model> {
        let (m, _) = self.snapshot(model)?;
        Ok(m)
    }
}

impl DkmPhase {
    /// Hard nearest-centroid assignment against the current codebooks.
    fn snapshot(&self, model: &Model) -> Result<(Model, Vec<Palette>)> {
        let mut out = model.clone();
        let mut palettes = Vec::new();
        for (name, w) in out.weights_mut() {
            let l = &self.layers[name];
            let p = Palette::from_codebook(name, w.data(), l.bits, l.dim, l.codebook.clone())?;
            *w = Tensor::new(w.shape().to_vec(), p.reconstruct())?;
            palettes.push(p);
        }
        Ok((out, palettes))
    }
}

// --------------------------------------------------------------------- loop

struct LoopSettings {
    lr: f64,
    epochs: usize,
    seed: u64,
    threads: usize,
}

fn train_loop(
    model: &mut Model,
    phase: &mut dyn Phase,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    s: &LoopSettings,
) -> Result<Vec<EpochRecord>> {
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * s.epochs;
    let mut sgd = Sgd::from_config(cfg);
    let mut records = Vec::with_capacity(s.epochs);
    let mut step = 0;
    for epoch in 0..s.epochs {
        let order = train.shuffled_order(s.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = s.lr;
        for chunk in order.chunks(cfg.batch_size) {
            lr = lr_schedule(step, total_steps, steps_per_epoch, s.lr, cfg);
            let (x, y) = train.batch(chunk)?;
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true)?;
            phase.register(&mut tape)?;
            let xv = tape.constant(x)?;
            let logits = model.forward(&mut tape, &vars, xv, phase)?;
            let ce = tape.softmax_ce(logits, &y)?;
            let named: Vec<(String, Var)> = model.weight_names().into_iter().zip(vars.weights.iter().copied()).collect();
            let loss = match phase.penalty(&mut tape, &named)? {
                Some(p) => tape.add(ce, p)?,
                None => ce,
            };
            tape.backward(loss)?;

            loss_sum += tape.value(ce).item()? * chunk.len() as f64;
            correct += argmax_rows(tape.value(logits)).iter().zip(&y).filter(|(p, t)| p == t).count();

            for ((name, w), &v) in model.weights_mut().into_iter().zip(&vars.weights) {
                let g = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; w.numel()]);
                sgd.step(&format!("{name}.weight"), w.data_mut(), &g, lr, true)?;
            }
            let names = model.weight_names();
            for ((name, b), &v) in names.iter().zip(model.biases_mut()).zip(&vars.biases) {
                let g = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; b.numel()]);
                sgd.step(&format!("{name}.bias"), b.data_mut(), &g, lr, true)?;
            }
            phase.update(&tape, &mut sgd, lr)?;
            step += 1;
        }
        let eval = phase.eval_model(model)?;
        let test_accuracy = evaluate(&eval, test, &phase.eval_hooks(), cfg.eval_batch_size, s.threads)?;
        records.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            task_loss: loss_sum / train.len() as f64,
            reg_loss: phase.reg_metric(model)?,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy,
            layers: layer_records(model)?,
        });
    }
    Ok(records)
}

/// Number of distinct values, counting `-0.0` and `0.0` once.
fn distinct(values: &[f64]) -> usize {
    let mut v: Vec<u64> = values.iter().map(|x| (x + 0.0).to_bits()).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

#[allow(clippy::too_many_arguments)]
fn base_summary(
    phase: &str,
    cfg: &ExperimentConfig,
    opts: RunOptions,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    eval_model: &Model,
    metrics: &[EpochRecord],
) -> Result<Summary> {
    let last = metrics.last().ok_or_else(|| Error::EmptyData("no epochs were run".into()))?;
    let mut layers = Vec::new();
    for (name, w) in eval_model.weights() {
        let s = layer_stats(name, w.data())?;
        layers.push(LayerSummary {
            layer: name.to_string(),
            params: w.numel(),
            range: s.range,
            std: s.std,
            kurtosis: s.kurtosis,
            distinct_values: distinct(w.data()),
            bits: None,
            step: None,
            act_clip: None,
            tau: None,
        });
    }
    Ok(Summary {
        phase: phase.into(),
        architecture: eval_model.arch.name(),
        seed: opts.seed,
        config_hash: config_hash(cfg)?,
        train_samples: train.len(),
        test_samples: test.len(),
        epochs,
        reg_kind: cfg.reg.kind.as_str().into(),
        init_test_accuracy: None,
        final_test_accuracy: last.test_accuracy,
        final_task_loss: last.task_loss,
        std_convention: "population".into(),
        layers,
        size_report: None,
        warnings: Vec::new(),
    })
}

fn check_data(model_arch: &Architecture, train: &Dataset, test: &Dataset) -> Result<()> {
    for d in [train, test] {
        if d.image_shape != model_arch.input {
            return Err(Error::Consistency(format!(
                "{} images are {:?}, model expects {:?}",
                d.split, d.image_shape, model_arch.input
            )));
        }
        if d.num_classes > model_arch.classes {
            return Err(Error::Consistency(format!(
                "{} has {} classes, model has {}",
                d.split, d.num_classes, model_arch.classes
            )));
        }
    }
    Ok(())
}

/// Architecture implied by the config and the training data.
pub fn architecture_for(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Architecture {
    cfg.model.architecture(train.image_shape, train.num_classes.max(test.num_classes))
}

// -------------------------------------------------------------- entry points

/// Trains a fresh model with the configured range regularizer.
pub fn run_pretrain(cfg: &ExperimentConfig, opts: RunOptions, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let mut model = Model::new(architecture_for(cfg, train, test), opts.seed)?;
    check_data(&model.arch, train, test)?;
    let state = RegState::init(cfg.reg.kind, cfg.reg.lambda, cfg.reg.alpha0, model.weights())?;
    let mut phase = RegPhase { state, vars: BTreeMap::new() };
    let settings = LoopSettings { lr: cfg.train.lr, epochs: cfg.train.epochs, seed: opts.seed, threads: opts.threads };
    let metrics = train_loop(&mut model, &mut phase, train, test, &cfg.train, &settings)?;
    let summary = base_summary("pretrain", cfg, opts, train, test, settings.epochs, &model, &metrics)?;
    Ok(RunOutput {
        checkpoint: Checkpoint {
            model: model.clone(),
            reg: phase.state,
            quant: None,
            palettes: Vec::new(),
            seed: opts.seed,
            config_hash: summary.config_hash.clone(),
        },
        eval_model: model,
        metrics,
        summary,
    })
}

/// Records the largest post-ReLU activation per layer, with weights already
/// fake-quantized.
struct Calibrate<'a> {
    state: &'a QuantState,
    max: BTreeMap<String, f64>,
}

impl ForwardHooks for Calibrate<'_> {
    fn weight(&mut self, tape: &mut Tape, layer: &str, w: Var) -> Result<Var> {
        let lq = &self.state.per_layer[layer];
        let q = fake_quant_weight(tape.value(w), lq.bits, lq.step)?;
        tape.constant(q)
    }

    fn activation(&mut self, tape: &mut Tape, layer: &str, x: Var) -> Result<Var> {
        let m = tape.value(x).data().iter().fold(0.0f64, |a, &b| a.max(b));
        self.max.insert(layer.to_string(), m);
        Ok(x)
    }
}

fn starting_model(init: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<Model> {
    check_data(&init.model.arch, train, test)?;
    Ok(init.model.clone())
}

/// Quantizer state for `model`: steps from a compatible checkpoint state,
/// otherwise statistical initialization; PACT clips from the config or
/// calibrated on the first training batch.
fn init_quant_state(cfg: &ExperimentConfig, opts: RunOptions, model: &Model, prior: Option<&QuantState>, train: &Dataset) -> Result<QuantState> {
    let q = &cfg.quant;
    let mut per_layer = BTreeMap::new();
    for (name, w) in model.weights() {
        let reuse = prior
            .filter(|p| p.method == q.method)
            .and_then(|p| p.per_layer.get(name))
            .filter(|lq| lq.bits == q.bits);
        let step = match reuse {
            Some(lq) => lq.step,
            None => init_step_statistical(w.data(), q.bits)?.0,
        };
        per_layer.insert(name.to_string(), LayerQuant { bits: q.bits, step, act_clip: None });
    }
    let mut state = QuantState { method: q.method, ewgs_delta: q.ewgs_delta, act_bits: q.resolved_act_bits(), per_layer };
    if q.act_quant {
        let clips: BTreeMap<String, f64> = match q.act_clip_init {
            Some(a) => model.weight_names().into_iter().map(|n| (n, a)).collect(),
            None => {
                let order = train.shuffled_order(opts.seed, 0);
                let first = &order[..cfg.train.batch_size.min(order.len())];
                let (x, _) = train.batch(first)?;
                let mut cal = Calibrate { state: &state, max: BTreeMap::new() };
                model.logits(&x, &mut cal)?;
                cal.max
            }
        };
        for (name, clip) in clips {
            if let Some(lq) = state.per_layer.get_mut(&name) {
                // ReLUs follow every layer but the last; only those get a clip.
                if model.weight_names().last() != Some(&name) {
                    lq.act_clip = Some(clip.max(MIN_ACT_CLIP));
                }
            }
        }
    }
    for lq in state.per_layer.values() {
        lq.validate()?;
    }
    Ok(state)
}

/// Quantization-aware training of every layer from `init`.
pub fn run_qat(cfg: &ExperimentConfig, opts: RunOptions, init: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let mut model = starting_model(init, train, test)?;
    let init_acc = evaluate(&model, test, &EvalHooks::default(), cfg.train.eval_batch_size, opts.threads)?;
    let state = init_quant_state(cfg, opts, &model, init.quant.as_ref(), train)?;
    let mut phase = QuantPhase { state, step_vars: BTreeMap::new(), clip_vars: BTreeMap::new() };
    let settings = LoopSettings {
        lr: cfg.quant.lr.unwrap_or(cfg.train.lr),
        epochs: cfg.quant.epochs.unwrap_or(cfg.train.epochs),
        seed: opts.seed,
        threads: opts.threads,
    };
    let metrics = train_loop(&mut model, &mut phase, train, test, &cfg.train, &settings)?;
    let eval_model = phase.eval_model(&model)?;
    let mut summary = base_summary("qat", cfg, opts, train, test, settings.epochs, &eval_model, &metrics)?;
    summary.init_test_accuracy = Some(init_acc);
    for l in &mut summary.layers {
        let lq = &phase.state.per_layer[&l.layer];
        l.bits = Some(lq.bits);
        l.step = Some(lq.step);
        l.act_clip = lq.act_clip;
    }
    Ok(RunOutput {
        checkpoint: Checkpoint {
            model,
            reg: init.reg.clone(),
            quant: Some(phase.state),
            palettes: Vec::new(),
            seed: opts.seed,
            config_hash: summary.config_hash.clone(),
        },
        eval_model,
        metrics,
        summary,
    })
}

/// Checks every layer's `{bits, dim}` against its size.
pub fn validate_palette_config(cfg: &ExperimentConfig, model: &Model) -> Result<()> {
    let names = model.weight_names();
    if let Some(unknown) = cfg.palette.layers.keys().find(|k| !names.contains(k)) {
        return Err(Error::Config(format!("palette.layers.{unknown}: model has no such layer")));
    }
    for (name, w) in model.weights() {
        let p = cfg.palette.for_layer(name);
        validate_spec(name, p.bits, p.dim, w.numel())?;
    }
    Ok(())
}

/// Differentiable k-means compression of every layer from `init`, ending in
/// a hard palette snapshot.
pub fn run_compress(cfg: &ExperimentConfig, opts: RunOptions, init: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let mut model = starting_model(init, train, test)?;
    validate_palette_config(cfg, &model)?;
    let init_acc = evaluate(&model, test, &EvalHooks::default(), cfg.train.eval_batch_size, opts.threads)?;
    let mut layers = BTreeMap::new();
    for (i, (name, w)) in model.weights().into_iter().enumerate() {
        let p = cfg.palette.for_layer(name);
        let groups = group_weights(w.data(), p.dim)?;
        let fit = kmeans_fit(&groups, 1 << p.bits, cfg.palette.kmeans_iters, 1e-12, opts.seed.wrapping_add(i as u64))?;
        let mse = fit.sse_history.last().copied().unwrap_or(0.0) / groups.len() as f64;
        let tau = cfg.palette.tau.unwrap_or((cfg.palette.tau_scale * mse).max(1e-12));
        layers.insert(name.to_string(), DkmLayer { bits: p.bits, dim: p.dim, tau, codebook: fit.codebook, pending: None });
    }
    let mut phase = DkmPhase { layers };
    let settings = LoopSettings {
        lr: cfg.palette.lr.unwrap_or(cfg.train.lr),
        epochs: cfg.palette.epochs.unwrap_or(cfg.train.epochs),
        seed: opts.seed,
        threads: opts.threads,
    };
    let metrics = train_loop(&mut model, &mut phase, train, test, &cfg.train, &settings)?;
    let (eval_model, palettes) = phase.snapshot(&model)?;
    let mut summary = base_summary("compress", cfg, opts, train, test, settings.epochs, &eval_model, &metrics)?;
    summary.init_test_accuracy = Some(init_acc);
    let mut compression = BTreeMap::new();
    for l in &mut summary.layers {
        let d = &phase.layers[&l.layer];
        l.bits = Some(d.bits);
        l.tau = Some(d.tau);
        compression.insert(l.layer.clone(), Compression::Palette { bits: d.bits, dim: d.dim });
    }
    summary.size_report = Some(size_report(&eval_model.size_entries(), &compression, cfg.palette.fp_bits)?);
    Ok(RunOutput {
        checkpoint: Checkpoint {
            model: eval_model.clone(),
            reg: init.reg.clone(),
            quant: None,
            palettes,
            seed: opts.seed,
            config_hash: summary.config_hash.clone(),
        },
        eval_model,
        metrics,
        summary,
    })
}

/// Gradient descent on the regularizer alone (task loss held at zero), as
/// used for the outlier-shrinking demonstrations. Returns each layer's
/// range after every step.
pub fn reg_descent(layers: &mut [(String, Tensor)], state: &mut RegState, lr: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut sgd = Sgd::new(0.0, 0.0, false);
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut tape = Tape::new();
        let mut phase = RegPhase { state: state.clone(), vars: BTreeMap::new() };
        let vars: Vec<(String, Var)> = layers
            .iter()
            .map(|(n, w)| Ok((n.clone(), tape.param(w.clone())?)))
            .collect::<Result<_>>()?;
        phase.register(&mut tape)?;
        let Some(loss) = phase.penalty(&mut tape, &vars)? else {
            return Err(Error::Config("regularizer is inactive".into()));
        };
        tape.backward(loss)?;
        for ((name, w), (_, v)) in layers.iter_mut().zip(&vars) {
            let g = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; w.numel()]);
            sgd.step(name, w.data_mut(), &g, lr, false)?;
        }
        phase.update(&tape, &mut sgd, lr)?;
        *state = phase.state;
        history.push(
            layers
                .iter()
                .map(|(_, w)| {
                    let d = w.data();
                    d.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - d.iter().cloned().fold(f64::INFINITY, f64::min)
                })
                .collect(),
        );
    }
    Ok(history)
}

/// Per-layer regularizer parameters of `state` (M or alpha).
pub fn reg_params(state: &RegState) -> BTreeMap<String, Option<f64>> {
    state.per_layer.iter().map(|(k, v): (&String, &LayerReg)| (k.clone(), v.param())).collect()
}
