//! Fake quantization for QAT: a signed symmetric weight grid with clipped
//! straight-through, LSQ step-size and EWGS gradient rules, plus PACT
//! activation clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EWGS_DELTA: f64 = 0.1;
/// Step used when a tensor is entirely zero.
pub const DEGENERATE_STEP: f64 = 1e-8;

/// Backward rule used for fake-quantized weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMethod {
    /// Clipped straight-through estimator; step fixed at its initial value.
    Ste,
    /// Learned step size.
    Lsq,
    /// Element-wise gradient scaling on top of LSQ's step learning.
    Ewgs,
}

/// Signed symmetric integer grid `{−Q_N, …, Q_P}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Levels {
    pub q_n: i64,
    pub q_p: i64,
}

impl Levels {
    pub fn for_bits(bits: u32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::Domain(format!("bit width must be in [1, 8], got {bits}")));
        }
        let half = 1i64 << (bits - 1);
        Ok(Levels { q_n: half, q_p: half - 1 })
    }

    /// `Q_P` floored at 1, as used in step initialization and LSQ scaling.
    pub fn q_p_scale(&self) -> f64 {
        self.q_p.max(1) as f64
    }
}

/// Per-layer weight quantizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub bits: u32,
    pub step: f64,
    /// PACT clip for the activation following this layer, if quantized.
    pub act_clip: Option<f64>,
}

impl LayerQuant {
    pub fn levels(&self) -> Result<Levels> {
        Levels::for_bits(self.bits)
    }

    pub fn validate(&self) -> Result<()> {
        self.levels()?;
        check_step(self.step)?;
        if let Some(a) = self.act_clip {
            check_clip(a)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantState {
    pub method: QuantMethod,
    pub ewgs_delta: f64,
    /// Activation bit width; `None` leaves activations in full precision.
    pub act_bits: Option<u32>,
    pub per_layer: std::collections::BTreeMap<String, LayerQuant>,
}

fn check_step(s: f64) -> Result<()> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("step size must be finite and > 0, got {s}")));
    }
    Ok(())
}

fn check_clip(a: f64) -> Result<()> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("activation clip must be finite and > 0, got {a}")));
    }
    Ok(())
}

/// Round half away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

#[inline]
fn quantize_one(w: f64, step: f64, lv: Levels) -> f64 {
    round_half_away(w / step).clamp(-lv.q_n as f64, lv.q_p as f64) * step
}

#[inline]
fn in_range(w: f64, step: f64, lv: Levels) -> bool {
    let v = w / step;
    v >= -lv.q_n as f64 && v <= lv.q_p as f64
}

/// `clamp(round(w/s), −Q_N, Q_P)·s`.
pub fn fake_quant_weight(w: &Tensor, bits: u32, step: f64) -> Result<Tensor> {
    check_step(step)?;
    let lv = Levels::for_bits(bits)?;
    Ok(w.map(|v| quantize_one(v, step, lv)))
}

/// Integer grid index of every element (`round(w/s)` clamped).
pub fn grid_indices(w: &[f64], bits: u32, step: f64) -> Result<Vec<i64>> {
    check_step(step)?;
    let lv = Levels::for_bits(bits)?;
    Ok(w.iter()
        .map(|&v| round_half_away(v / step).clamp(-lv.q_n as f64, lv.q_p as f64) as i64)
        .collect())
}

/// True when every value is exactly `k·s` for an integer `k` in the grid.
pub fn on_grid(w: &[f64], bits: u32, step: f64) -> Result<bool> {
    let idx = grid_indices(w, bits, step)?;
    Ok(w.iter().zip(idx).all(|(&v, k)| v == k as f64 * step))
}

/// Clipped straight-through estimator: pass the gradient where `w/s` is in range.
pub fn ste_backward(grad: &[f64], w: &[f64], bits: u32, step: f64) -> Result<Vec<f64>> {
    check_step(step)?;
    let lv = Levels::for_bits(bits)?;
    if grad.len() != w.len() {
        return Err(Error::Shape(format!("{} gradients for {} weights", grad.len(), w.len())));
    }
    Ok(grad
        .iter()
        .zip(w)
        .map(|(&g, &v)| if in_range(v, step, lv) { g } else { 0.0 })
        .collect())
}

/// LSQ gradient scale `1/sqrt(n·Q_P)`.
pub fn lsq_grad_scale(n_weights: usize, lv: Levels) -> f64 {
    1.0 / (n_weights as f64 * lv.q_p_scale()).sqrt()
}

/// Returns `(dL/dw, dL/ds)` with the step gradient already scaled.
pub fn lsq_grads(
    grad: &[f64],
    w: &[f64],
    bits: u32,
    step: f64,
    n_weights: usize,
) -> Result<(Vec<f64>, f64)> {
    if n_weights == 0 {
        return Err(Error::Domain("lsq_grads needs n_weights ≥ 1".into()));
    }
    let dw = ste_backward(grad, w, bits, step)?;
    let lv = Levels::for_bits(bits)?;
    let ds: f64 = grad.iter().zip(w).map(|(&g, &v)| g * lsq_step_partial(v, step, lv)).sum();
    Ok((dw, ds * lsq_grad_scale(n_weights, lv)))
}

/// `dŵ/ds` for a single weight.
fn lsq_step_partial(w: f64, step: f64, lv: Levels) -> f64 {
    let v = w / step;
    if v < -lv.q_n as f64 {
        -lv.q_n as f64
    } else if v > lv.q_p as f64 {
        lv.q_p as f64
    } else {
        round_half_away(v) - v
    }
}

/// `g·(1 + δ·sign(g)·(w − ŵ))` element-wise.
pub fn ewgs_scale(grad: &[f64], w: &[f64], w_hat: &[f64], delta: f64) -> Result<Vec<f64>> {
    if !(delta >= 0.0) {
        return Err(Error::Domain(format!("EWGS delta must be ≥ 0, got {delta}")));
    }
    Ok(grad
        .iter()
        .zip(w.iter().zip(w_hat))
        .map(|(&g, (&v, &q))| {
            let sign = if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 };
            g * (1.0 + delta * sign * (v - q))
        })
        .collect())
}

/// PACT clip `clamp(x, 0, α)` with gradients `(dx, dα)`.
pub fn pact_clip(x: &[f64], grad: &[f64], clip: f64) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    check_clip(clip)?;
    let y = x.iter().map(|&v| v.clamp(0.0, clip)).collect();
    let dx = x.iter().zip(grad).map(|(&v, &g)| if v > 0.0 && v < clip { g } else { 0.0 }).collect();
    let dclip = x.iter().zip(grad).filter(|(&v, _)| v >= clip).map(|(_, &g)| g).sum();
    Ok((y, dx, dclip))
}

/// Uniform activation grid on `[0, α]` with `2^bits − 1` steps after the PACT clip.
pub fn pact_quantize(x: &[f64], clip: f64, bits: u32) -> Result<Vec<f64>> {
    check_clip(clip)?;
    if !(1..=16).contains(&bits) {
        return Err(Error::Domain(format!("activation bits must be in [1, 16], got {bits}")));
    }
    let steps = ((1u32 << bits) - 1) as f64;
    let s = clip / steps;
    Ok(x.iter().map(|&v| round_half_away(v.clamp(0.0, clip) / s) * s).collect())
}

/// `2·mean(|w|)/sqrt(Q_P)`, with a tiny fallback for all-zero tensors.
/// The flag reports whether the fallback was taken.
pub fn init_step_statistical(w: &[f64], bits: u32) -> Result<(f64, bool)> {
    if w.is_empty() {
        return Err(Error::Domain("init_step_statistical on an empty tensor".into()));
    }
    let lv = Levels::for_bits(bits)?;
    let mean_abs = w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
    if mean_abs == 0.0 {
        return Ok((DEGENERATE_STEP, true));
    }
    Ok((2.0 * mean_abs / lv.q_p_scale().sqrt(), false))
}

/// Range-based symmetric quantizer with an odd number of bins: step
/// `max|w| / ((n−1)/2)`. Returns the signed bin index of every weight.
pub fn range_bins(w: &[f64], n_bins: usize) -> Result<Vec<i64>> {
    if n_bins < 3 || n_bins.is_multiple_of(2) {
        return Err(Error::Domain(format!("range_bins needs an odd count ≥ 3, got {n_bins}")));
    }
    let half = ((n_bins - 1) / 2) as f64;
    let peak = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok(vec![0; w.len()]);
    }
    let step = peak / half;
    Ok(w.iter().map(|&v| round_half_away(v / step).clamp(-half, half) as i64).collect())
}

/// Fraction of the weights selected by `members` that land in the zero bin
/// of a range-based quantizer fitted to all of `w`.
pub fn zero_bin_fraction(w: &[f64], n_bins: usize, members: impl Fn(usize) -> bool) -> Result<f64> {
    let bins = range_bins(w, n_bins)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (_, b) in bins.iter().enumerate().filter(|(i, _)| members(*i)) {
        total += 1;
        hit += (*b == 0) as usize;
    }
    if total == 0 {
        return Err(Error::Domain("zero_bin_fraction over an empty selection".into()));
    }
    Ok(hit as f64 / total as f64)
}

struct WeightQuantOp {
    method: QuantMethod,
    bits: u32,
    delta: f64,
}

impl CustomOp for WeightQuantOp {
    fn name(&self) -> &str {
        "fake_quant_weight"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (w, step) = (inputs[0].data(), inputs[1].data()[0]);
        match self.method {
            QuantMethod::Ste => {
                let dw = ste_backward(g, w, self.bits, step).expect("validated in forward");
                vec![Some(dw), None]
            }
            QuantMethod::Lsq | QuantMethod::Ewgs => {
                let (mut dw, ds) =
                    lsq_grads(g, w, self.bits, step, w.len()).expect("validated in forward");
                if self.method == QuantMethod::Ewgs {
                    dw = ewgs_scale(&dw, w, out.data(), self.delta).expect("validated delta");
                }
                vec![Some(dw), Some(vec![ds])]
            }
        }
    }
}

/// Records a fake-quantized weight on the tape. `step` is a one-element
/// variable (a parameter for LSQ/EWGS, a constant for STE).
pub fn fake_quant_on_tape(
    tape: &mut Tape,
    w: Var,
    step: Var,
    bits: u32,
    method: QuantMethod,
    delta: f64,
) -> Result<Var> {
    if !(delta >= 0.0) {
        return Err(Error::Domain(format!("EWGS delta must be ≥ 0, got {delta}")));
    }
    let out = fake_quant_weight(tape.value(w), bits, tape.value(step).item()?)?;
    tape.custom(&[w, step], out, Box::new(WeightQuantOp { method, bits, delta }))
}

struct PactOp;

impl CustomOp for PactOp {
    fn name(&self) -> &str {
        "pact"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (_, dx, dclip) =
            pact_clip(inputs[0].data(), g, inputs[1].data()[0]).expect("validated in forward");
        vec![Some(dx), Some(vec![dclip])]
    }
}

/// PACT clip (and optional uniform quantization) of an activation.
/// Rounding is straight-through, so gradients are those of the clip.
pub fn pact_on_tape(tape: &mut Tape, x: Var, clip: Var, bits: Option<u32>) -> Result<Var> {
    let a = tape.value(clip).item()?;
    let xv = tape.value(x);
    let data = match bits {
        Some(b) => pact_quantize(xv.data(), a, b)?,
        None => pact_clip(xv.data(), &vec![0.0; xv.numel()], a)?.0,
    };
    let out = Tensor::new(xv.shape().to_vec(), data)?;
    tape.custom(&[x, clip], out, Box::new(PactOp))
}
