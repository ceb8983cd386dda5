//! Experiment configuration: one nested record covering the model, data,
//! optimizer, regularizer, quantizer, palettizer and report knobs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data_io::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{ArchKind, Architecture};
use crate::quantizers::{QuantMethod, DEFAULT_EWGS_DELTA};
use crate::regularizers::{RegKind, ALPHA_MIN, DEFAULT_ALPHA, DEFAULT_LAMBDA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub reg: RegConfig,
    pub quant: QuantConfig,
    pub palette: PaletteConfig,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// MLP hidden widths.
    pub hidden: Vec<usize>,
    /// CNN conv channel counts.
    pub channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: ArchKind::Mlp, hidden: vec![128, 64], channels: vec![16, 32] }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input: [usize; 3], classes: usize) -> Architecture {
        match self.arch {
            ArchKind::Mlp => Architecture::mlp(input, self.hidden.clone(), classes),
            ArchKind::Cnn => Architecture::cnn(input, self.channels.clone(), classes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first N training / test samples.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Seed of the synthetic dataset, independent of the run seed so every
    /// phase of a pipeline sees the same samples.
    pub seed: u64,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: None,
            test_limit: None,
            seed: 0,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Step,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleKind,
    /// Step schedule: epochs between decays and the decay factor.
    pub step_epochs: usize,
    pub gamma: f64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            nesterov: true,
            epochs: 10,
            batch_size: 16,
            schedule: ScheduleKind::Cosine,
            step_epochs: 3,
            gamma: 0.1,
            eval_batch_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub kind: RegKind,
    pub lambda: f64,
    pub alpha0: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig { kind: RegKind::None, lambda: DEFAULT_LAMBDA, alpha0: DEFAULT_ALPHA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u32,
    pub method: QuantMethod,
    pub ewgs_delta: f64,
    /// Quantize ReLU outputs with a learned PACT clip.
    pub act_quant: bool,
    /// Activation bit width; defaults to the weight bit width.
    pub act_bits: Option<u32>,
    /// Initial PACT clip; calibrated from the first batch when absent.
    pub act_clip_init: Option<f64>,
    /// Overrides of the train section for this phase.
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            bits: 4,
            method: QuantMethod::Lsq,
            ewgs_delta: DEFAULT_EWGS_DELTA,
            act_quant: true,
            act_bits: None,
            act_clip_init: None,
            lr: None,
            epochs: None,
        }
    }
}

impl QuantConfig {
    pub fn resolved_act_bits(&self) -> Option<u32> {
        self.act_quant.then(|| self.act_bits.unwrap_or(self.bits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPaletteConfig {
    pub bits: u32,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PaletteConfig {
    pub bits: u32,
    pub dim: usize,
    /// Per-layer overrides of `bits`/`dim`, keyed by layer name.
    pub layers: BTreeMap<String, LayerPaletteConfig>,
    /// Fixed attention temperature; when absent each layer uses
    /// `tau_scale` times its initial k-means mean squared error.
    pub tau: Option<f64>,
    pub tau_scale: f64,
    pub kmeans_iters: usize,
    /// Storage width of codebooks and uncompressed tensors.
    pub fp_bits: u32,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
}

impl Default for PaletteConfig {
    fn default() -> Self {
        PaletteConfig {
            bits: 4,
            dim: 1,
            layers: BTreeMap::new(),
            tau: None,
            tau_scale: 1.0,
            kmeans_iters: 100,
            fp_bits: 32,
            lr: None,
            epochs: None,
        }
    }
}

impl PaletteConfig {
    pub fn for_layer(&self, layer: &str) -> LayerPaletteConfig {
        self.layers
            .get(layer)
            .copied()
            .unwrap_or(LayerPaletteConfig { bits: self.bits, dim: self.dim })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub histogram_bins: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { histogram_bins: crate::analytics::DEFAULT_BINS }
    }
}

fn bad(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(path, format!("must be finite and > 0, got {v}")))
    }
}

impl ExperimentConfig {
    /// Checks every knob; run before any data is loaded or trained on.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.arch == ArchKind::Cnn && m.channels.is_empty() {
            return Err(bad("model.channels", "a CNN needs at least one conv layer"));
        }
        if m.hidden.iter().chain(&m.channels).any(|&w| w == 0) {
            return Err(bad("model", "layer widths must be ≥ 1"));
        }

        let d = &self.data;
        match d.source {
            DataSource::Synth => d.synth.validate().map_err(|e| bad("data.synth", e))?,
            DataSource::Idx => {
                for (name, p) in [
                    ("data.train_images", &d.train_images),
                    ("data.train_labels", &d.train_labels),
                    ("data.test_images", &d.test_images),
                    ("data.test_labels", &d.test_labels),
                ] {
                    if p.is_none() {
                        return Err(bad(name, "required when data.source = \"idx\""));
                    }
                }
            }
        }
        if d.train_limit == Some(0) || d.test_limit == Some(0) {
            return Err(bad("data", "sample limits must be ≥ 1"));
        }

        let t = &self.train;
        positive("train.lr", t.lr)?;
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(bad("train.momentum", format!("must be in [0, 1), got {}", t.momentum)));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(bad("train.weight_decay", format!("must be ≥ 0, got {}", t.weight_decay)));
        }
        if t.epochs == 0 {
            return Err(bad("train.epochs", "must be ≥ 1"));
        }
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return Err(bad("train.batch_size", "must be ≥ 1"));
        }
        if t.schedule == ScheduleKind::Step {
            if t.step_epochs == 0 {
                return Err(bad("train.step_epochs", "must be ≥ 1"));
            }
            positive("train.gamma", t.gamma)?;
        }

        let r = &self.reg;
        if !(r.lambda >= 0.0 && r.lambda.is_finite()) {
            return Err(bad("reg.lambda", format!("must be ≥ 0, got {}", r.lambda)));
        }
        if !(r.alpha0 >= ALPHA_MIN && r.alpha0.is_finite()) {
            return Err(bad("reg.alpha0", format!("must be ≥ {ALPHA_MIN}, got {}", r.alpha0)));
        }

        let q = &self.quant;
        if !(1..=8).contains(&q.bits) {
            return Err(bad("quant.bits", format!("must be in [1, 8], got {}", q.bits)));
        }
        if let Some(b) = q.act_bits {
            if !(1..=8).contains(&b) {
                return Err(bad("quant.act_bits", format!("must be in [1, 8], got {b}")));
            }
        }
        if !(q.ewgs_delta >= 0.0 && q.ewgs_delta.is_finite()) {
            return Err(bad("quant.ewgs_delta", format!("must be ≥ 0, got {}", q.ewgs_delta)));
        }
        if let Some(a) = q.act_clip_init {
            positive("quant.act_clip_init", a)?;
        }
        if let Some(lr) = q.lr {
            positive("quant.lr", lr)?;
        }
        if q.epochs == Some(0) {
            return Err(bad("quant.epochs", "must be ≥ 1"));
        }

        let p = &self.palette;
        let specs = std::iter::once(("palette".to_string(), LayerPaletteConfig { bits: p.bits, dim: p.dim }))
            .chain(p.layers.iter().map(|(k, v)| (format!("palette.layers.{k}"), *v)));
        for (path, s) in specs {
            if !(1..=16).contains(&s.bits) {
                return Err(bad(&format!("{path}.bits"), format!("must be in [1, 16], got {}", s.bits)));
            }
            if s.dim == 0 {
                return Err(bad(&format!("{path}.dim"), "must be ≥ 1"));
            }
        }
        if let Some(tau) = p.tau {
            positive("palette.tau", tau)?;
        }
        positive("palette.tau_scale", p.tau_scale)?;
        if p.kmeans_iters == 0 {
            return Err(bad("palette.kmeans_iters", "must be ≥ 1"));
        }
        if p.fp_bits == 0 || !p.fp_bits.is_multiple_of(8) {
            return Err(bad("palette.fp_bits", format!("must be a positive multiple of 8, got {}", p.fp_bits)));
        }
        if let Some(lr) = p.lr {
            positive("palette.lr", lr)?;
        }
        if p.epochs == Some(0) {
            return Err(bad("palette.epochs", "must be ≥ 1"));
        }
        if self.report.histogram_bins == 0 {
            return Err(bad("report.histogram_bins", "must be ≥ 1"));
        }
        Ok(())
    }
}
