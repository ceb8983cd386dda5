//! Range regularizers: L∞, margin and soft-min-max penalties on a layer's
//! weight spread, with analytic gradients for the weights and for the
//! learnable per-layer margin `M` and temperature `alpha`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::analytics::{mean, population_std};
use crate::error::{Error, Result};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Temperatures are clamped to this floor after every optimizer step.
pub const ALPHA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    None,
    Linf,
    Margin,
    SoftMinMax,
}

impl RegKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegKind::None => "none",
            RegKind::Linf => "linf",
            RegKind::Margin => "margin",
            RegKind::SoftMinMax => "soft_min_max",
        }
    }
}

/// Learnable parameter attached to one regularized layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerReg {
    Linf,
    Margin { m: f64 },
    SoftMinMax { alpha: f64 },
}

impl LayerReg {
    /// The learnable scalar, if the regularizer has one.
    pub fn param(&self) -> Option<f64> {
        match *self {
            LayerReg::Linf => None,
            LayerReg::Margin { m } => Some(m),
            LayerReg::SoftMinMax { alpha } => Some(alpha),
        }
    }

    pub fn set_param(&mut self, value: f64) {
        match self {
            LayerReg::Linf => {}
            LayerReg::Margin { m } => *m = value,
            LayerReg::SoftMinMax { alpha } => *alpha = value.max(ALPHA_MIN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegState {
    pub kind: RegKind,
    pub lambda: f64,
    pub per_layer: BTreeMap<String, LayerReg>,
}

impl RegState {
    pub fn none() -> Self {
        RegState { kind: RegKind::None, lambda: 0.0, per_layer: BTreeMap::new() }
    }

    /// Builds per-layer state for the given weight tensors. Margins start at
    /// twice the weight standard deviation, temperatures at `alpha0`.
    pub fn init<'a>(
        kind: RegKind,
        lambda: f64,
        alpha0: f64,
        layers: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda must be ≥ 0, got {lambda}")));
        }
        if kind == RegKind::SoftMinMax && !(alpha0 >= ALPHA_MIN) {
            return Err(Error::Domain(format!("alpha must be ≥ {ALPHA_MIN}, got {alpha0}")));
        }
        let mut per_layer = BTreeMap::new();
        if kind != RegKind::None {
            for (name, w) in layers {
                let entry = match kind {
                    RegKind::Linf => LayerReg::Linf,
                    RegKind::Margin => LayerReg::Margin { m: init_margin(w)? },
                    RegKind::SoftMinMax => LayerReg::SoftMinMax { alpha: alpha0 },
                    RegKind::None => unreachable!(),
                };
                per_layer.insert(name.to_string(), entry);
            }
        }
        Ok(RegState { kind, lambda, per_layer })
    }

    pub fn is_active(&self) -> bool {
        self.kind != RegKind::None && self.lambda > 0.0
    }

    /// Penalty of one layer, without the `lambda` factor.
    pub fn layer_loss(&self, layer: &str, w: &Tensor) -> Result<f64> {
        match self.layer(layer)? {
            LayerReg::Linf => linf_loss(&[w]),
            LayerReg::Margin { m } => margin_loss(w, m),
            LayerReg::SoftMinMax { alpha } => smm_loss(w, alpha),
        }
    }

    pub fn layer(&self, layer: &str) -> Result<LayerReg> {
        self.per_layer
            .get(layer)
            .copied()
            .ok_or_else(|| Error::Config(format!("no regularizer state for layer {layer}")))
    }
}

fn non_empty(w: &Tensor, what: &str) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Domain(format!("{what}: empty weight tensor")));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum over layers of `max_i |w_i|`.
pub fn linf_loss(weights: &[&Tensor]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Domain("linf_loss: no layers".into()));
    }
    weights.iter().try_fold(0.0, |acc, w| {
        non_empty(w, "linf_loss")?;
        Ok(acc + w.max_abs())
    })
}

/// Subgradient of `max|w|`. Ties share the unit mass equally.
pub fn linf_grad(w: &Tensor) -> Result<Tensor> {
    non_empty(w, "linf_grad")?;
    let peak = w.max_abs();
    let ties = w.data().iter().filter(|v| v.abs() == peak).count() as f64;
    Ok(w.map(|v| if v.abs() == peak { sign(v) / ties } else { 0.0 }))
}

/// `|M| + Σ_i max(|w_i| − |M|, 0)`.
pub fn margin_loss(w: &Tensor, m: f64) -> Result<f64> {
    non_empty(w, "margin_loss")?;
    if !m.is_finite() {
        return Err(Error::Domain(format!("margin must be finite, got {m}")));
    }
    let band = m.abs();
    let hinge: f64 = w.data().iter().map(|v| (v.abs() - band).max(0.0)).sum();
    Ok(band + hinge)
}

pub fn margin_grad(w: &Tensor, m: f64) -> Result<(Tensor, f64)> {
    non_empty(w, "margin_grad")?;
    if !m.is_finite() {
        return Err(Error::Domain(format!("margin must be finite, got {m}")));
    }
    let band = m.abs();
    let outside = w.data().iter().filter(|v| v.abs() > band).count() as f64;
    let dw = w.map(|v| if v.abs() > band { sign(v) } else { 0.0 });
    Ok((dw, sign(m) * (1.0 - outside)))
}

/// Temperature-weighted soft extremes of a weight tensor.
struct SoftExtremes {
    s_max: f64,
    s_min: f64,
    /// softmax(α·w), the weights behind `s_max`.
    p: Vec<f64>,
    /// softmax(−α·w), the weights behind `s_min`.
    q: Vec<f64>,
}

fn soft_extremes(w: &[f64], alpha: f64) -> SoftExtremes {
    let w_max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w_min = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let weighted = |scores: Vec<f64>| -> (f64, Vec<f64>) {
        let z: f64 = scores.iter().sum();
        let probs: Vec<f64> = scores.into_iter().map(|e| e / z).collect();
        let avg = probs.iter().zip(w).map(|(p, v)| p * v).sum();
        (avg, probs)
    };
    let (s_max, p) = weighted(w.iter().map(|v| (alpha * (v - w_max)).exp()).collect());
    let (s_min, q) = weighted(w.iter().map(|v| (-alpha * (v - w_min)).exp()).collect());
    SoftExtremes { s_max, s_min, p, q }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("alpha must be finite and ≥ 0, got {alpha}")));
    }
    Ok(())
}

/// `(s_max − s_min) + e^{−α}` with shifted exponents.
pub fn smm_loss(w: &Tensor, alpha: f64) -> Result<f64> {
    non_empty(w, "smm_loss")?;
    check_alpha(alpha)?;
    let s = soft_extremes(w.data(), alpha);
    Ok(s.s_max - s.s_min + (-alpha).exp())
}

pub fn smm_grad(w: &Tensor, alpha: f64) -> Result<(Tensor, f64)> {
    non_empty(w, "smm_grad")?;
    check_alpha(alpha)?;
    let s = soft_extremes(w.data(), alpha);
    // ds_max/dw_i = p_i (1 + α (w_i − s_max)),  ds_min/dw_i = q_i (1 − α (w_i − s_min))
    let dw: Vec<f64> = w
        .data()
        .iter()
        .zip(s.p.iter().zip(&s.q))
        .map(|(&v, (&p, &q))| p * (1.0 + alpha * (v - s.s_max)) - q * (1.0 - alpha * (v - s.s_min)))
        .collect();
    // ds_max/dα = Var_p(w),  ds_min/dα = −Var_q(w)
    let var_p: f64 = s.p.iter().zip(w.data()).map(|(p, v)| p * (v - s.s_max).powi(2)).sum();
    let var_q: f64 = s.q.iter().zip(w.data()).map(|(q, v)| q * (v - s.s_min).powi(2)).sum();
    let d_alpha = var_p + var_q - (-alpha).exp();
    Ok((Tensor::new(w.shape().to_vec(), dw)?, d_alpha))
}

/// Initial margin: twice the population standard deviation.
pub fn init_margin(w: &Tensor) -> Result<f64> {
    if w.numel() < 2 {
        return Err(Error::Domain("init_margin needs at least 2 weights".into()));
    }
    Ok(2.0 * population_std(w.data(), mean(w.data())))
}

/// `task_loss + lambda · Σ_layers reg(layer)` over the given weight tensors.
pub fn total_loss<'a>(
    task_loss: f64,
    reg: &RegState,
    layers: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<f64> {
    if !(reg.lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be ≥ 0, got {}", reg.lambda)));
    }
    if reg.kind == RegKind::None {
        return Ok(task_loss);
    }
    let mut penalty = 0.0;
    for (name, w) in layers {
        penalty += reg.layer_loss(name, w)?;
    }
    Ok(task_loss + reg.lambda * penalty)
}

struct LinfOp;

impl CustomOp for LinfOp {
    fn name(&self) -> &str {
        "linf_reg"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let dw = linf_grad(inputs[0]).expect("validated in forward");
        vec![Some(dw.data().iter().map(|v| v * g[0]).collect())]
    }
}

struct MarginOp;

impl CustomOp for MarginOp {
    fn name(&self) -> &str {
        "margin_reg"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (dw, dm) = margin_grad(inputs[0], inputs[1].data()[0]).expect("validated in forward");
        vec![Some(dw.data().iter().map(|v| v * g[0]).collect()), Some(vec![dm * g[0]])]
    }
}

struct SmmOp;

impl CustomOp for SmmOp {
    fn name(&self) -> &str {
        "soft_min_max_reg"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (dw, da) = smm_grad(inputs[0], inputs[1].data()[0]).expect("validated in forward");
        vec![Some(dw.data().iter().map(|v| v * g[0]).collect()), Some(vec![da * g[0]])]
    }
}

/// Records one layer's penalty on the tape. `param` is the tape variable for
/// `M` or `alpha` and must be given for the margin and soft-min-max kinds.
pub fn reg_on_tape(tape: &mut Tape, kind: RegKind, w: Var, param: Option<Var>) -> Result<Var> {
    let need_param = || {
        param.ok_or_else(|| Error::Config(format!("{} needs a learnable parameter", kind.as_str())))
    };
    match kind {
        RegKind::None => Err(Error::Config("no regularizer configured".into())),
        RegKind::Linf => {
            let value = linf_loss(&[tape.value(w)])?;
            tape.custom(&[w], Tensor::scalar(value), Box::new(LinfOp))
        }
        RegKind::Margin => {
            let p = need_param()?;
            let value = margin_loss(tape.value(w), tape.value(p).item()?)?;
            tape.custom(&[w, p], Tensor::scalar(value), Box::new(MarginOp))
        }
        RegKind::SoftMinMax => {
            let p = need_param()?;
            let value = smm_loss(tape.value(w), tape.value(p).item()?)?;
            tape.custom(&[w, p], Tensor::scalar(value), Box::new(SmmOp))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff::{finite_diff, finite_diff_scalar, max_rel_error, DEFAULT_EPS};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec())
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linf_examples() {
        assert_eq!(linf_loss(&[&t(&[0.5, -0.3, 0.2])]).unwrap(), 0.5);
        assert_eq!(linf_loss(&[&t(&[0.0, 0.0])]).unwrap(), 0.0);
        let two = linf_loss(&[&t(&[0.5, -0.3]), &t(&[-1.2])]).unwrap();
        assert!(close(two, 1.7, 1e-15));
        assert!(matches!(linf_loss(&[&t(&[])]), Err(Error::Domain(_))));
        assert!(linf_loss(&[]).is_err());
    }

    #[test]
    fn linf_grad_examples() {
        assert_eq!(linf_grad(&t(&[0.5, -0.3, 0.2])).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(linf_grad(&t(&[0.4, -0.4])).unwrap().data(), &[0.5, -0.5]);
        assert_eq!(linf_grad(&t(&[0.0, 0.0])).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn margin_examples() {
        let w = t(&[0.5, -0.3, 0.2]);
        assert!(close(margin_loss(&w, 0.4).unwrap(), 0.5, 1e-15));
        assert!(close(margin_loss(&w, 0.6).unwrap(), 0.6, 1e-15));
        assert!(close(margin_loss(&w, 0.0).unwrap(), 1.0, 1e-15));
        assert!(close(margin_loss(&w, -0.4).unwrap(), 0.5, 1e-15));
        assert!(margin_loss(&w, f64::NAN).is_err());

        let (dw, dm) = margin_grad(&w, 0.4).unwrap();
        assert_eq!(dw.data(), &[1.0, 0.0, 0.0]);
        assert_eq!(dm, 0.0);
        let (dw, dm) = margin_grad(&w, 0.9).unwrap();
        assert_eq!(dw.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(dm, 1.0);
        let (_, dm) = margin_grad(&w, 0.0).unwrap();
        assert_eq!(dm, 0.0);
    }

    #[test]
    fn margin_grad_matches_oracle_at_example() {
        let w = t(&[0.5, -0.3, 0.2]);
        let (dw, dm) = margin_grad(&w, 0.4).unwrap();
        let fd_w = finite_diff(|x| margin_loss(x, 0.4), &w, DEFAULT_EPS).unwrap();
        let fd_m = finite_diff_scalar(|m| margin_loss(&w, m), 0.4, DEFAULT_EPS).unwrap();
        assert!(max_rel_error(dw.data(), &fd_w) < 1e-9);
        assert!(close(dm, fd_m, 1e-9));
    }

    #[test]
    fn smm_examples() {
        let c = t(&[0.7, 0.7, 0.7]);
        assert!(close(smm_loss(&c, 1.0).unwrap(), (-1.0f64).exp(), 1e-15));
        assert!(close(smm_loss(&t(&[0.1, -2.0, 0.3, 1.5]), 0.0).unwrap(), 1.0, 1e-15));
        let l = smm_loss(&t(&[-1.0, 1.0]), 20.0).unwrap();
        assert!(close(l, 2.0 + (-20.0f64).exp(), 1e-8));
        assert!(smm_loss(&c, -0.5).is_err());
    }

    #[test]
    fn smm_grad_constant_weights_checked_by_oracle() {
        let c = t(&[0.3, 0.3, 0.3, 0.3]);
        for alpha in [0.0, 0.1, 2.0] {
            let (dw, da) = smm_grad(&c, alpha).unwrap();
            let fd = finite_diff(|x| smm_loss(x, alpha), &c, DEFAULT_EPS).unwrap();
            let at = alpha.max(DEFAULT_EPS);
            let fda = finite_diff_scalar(|a| smm_loss(&c, a), at, DEFAULT_EPS).unwrap();
            assert!(max_rel_error(dw.data(), &fd) < 1e-8);
            assert!(close(smm_grad(&c, at).unwrap().1, fda, 1e-8));
            assert!(dw.data().iter().all(|v| v.abs() < 1e-15));
            assert!(close(da, -(-alpha).exp(), 1e-15));
        }
    }

    #[test]
    fn smm_grad_at_zero_temperature() {
        let w = t(&[0.1, -0.5, 0.25, 0.9, -0.2]);
        let (dw, _) = smm_grad(&w, 0.0).unwrap();
        let fd = finite_diff(|x| smm_loss(x, 0.0), &w, DEFAULT_EPS).unwrap();
        assert!(max_rel_error(dw.data(), &fd) < 1e-9);
    }

    #[test]
    fn smm_grad_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(2..30);
            let w = t(&(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let alpha = rng.random_range(0.01..20.0);
            let (dw, da) = smm_grad(&w, alpha).unwrap();
            let fd = finite_diff(|x| smm_loss(x, alpha), &w, DEFAULT_EPS).unwrap();
            let fda = finite_diff_scalar(|a| smm_loss(&w, a), alpha, DEFAULT_EPS).unwrap();
            assert!(max_rel_error(dw.data(), &fd) <= 1e-5);
            assert!(max_rel_error(&[da], &[fda]) <= 1e-5);
        }
    }

    #[test]
    fn init_margin_examples() {
        assert!(close(init_margin(&t(&[-1.0, 1.0])).unwrap(), 2.0, 1e-15));
        assert_eq!(init_margin(&t(&[0.4; 6])).unwrap(), 0.0);
        assert!(matches!(init_margin(&t(&[1.0])), Err(Error::Domain(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let w = t(&(0..10_000).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>());
        let m = init_margin(&w).unwrap();
        assert!((m - 0.1).abs() <= 0.005, "m = {m}");
    }

    #[test]
    fn total_loss_examples() {
        let w = t(&[0.5, -0.1]);
        let layers = [("fc1", &w)];
        let none = RegState::none();
        assert_eq!(total_loss(1.25, &none, layers).unwrap(), 1.25);

        let mut off = RegState::init(RegKind::Linf, 0.0, DEFAULT_ALPHA, layers).unwrap();
        assert_eq!(total_loss(1.25, &off, layers).unwrap(), 1.25);
        off.lambda = DEFAULT_LAMBDA;
        assert!(close(total_loss(1.25, &off, layers).unwrap(), 1.255, 1e-15));
        off.lambda = -1.0;
        assert!(total_loss(1.25, &off, layers).is_err());
    }

    #[test]
    fn state_init_per_kind() {
        let w = t(&[-1.0, 1.0]);
        let s = RegState::init(RegKind::Margin, 0.01, 0.1, [("fc1", &w)]).unwrap();
        assert_eq!(s.per_layer["fc1"], LayerReg::Margin { m: 2.0 });
        let s = RegState::init(RegKind::SoftMinMax, 0.01, 0.1, [("fc1", &w)]).unwrap();
        assert_eq!(s.per_layer["fc1"], LayerReg::SoftMinMax { alpha: 0.1 });
        assert!(RegState::init(RegKind::SoftMinMax, 0.01, 0.0, [("fc1", &w)]).is_err());
        let mut a = LayerReg::SoftMinMax { alpha: 0.1 };
        a.set_param(-3.0);
        assert_eq!(a.param(), Some(ALPHA_MIN));
    }

    #[test]
    fn tape_composite_gradient_flows_to_task_and_reg() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(vec![2, 3], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let w = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let labels = [1usize, 3];
        let lambda = 0.3;
        let eval = |w: &Tensor, alpha: f64| -> Result<f64> {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone())?;
            let wv = tape.constant(w.clone())?;
            let o = tape.matmul(xv, wv)?;
            let ce = tape.softmax_ce(o, &labels)?;
            Ok(tape.value(ce).item()? + lambda * smm_loss(w, alpha)?)
        };
        let alpha = 1.7;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.param(w.clone()).unwrap();
        let av = tape.param(Tensor::scalar(alpha)).unwrap();
        let o = tape.matmul(xv, wv).unwrap();
        let ce = tape.softmax_ce(o, &labels).unwrap();
        let r = reg_on_tape(&mut tape, RegKind::SoftMinMax, wv, Some(av)).unwrap();
        let r = tape.scale(r, lambda).unwrap();
        let loss = tape.add(ce, r).unwrap();
        tape.backward(loss).unwrap();
        let fd_w = finite_diff(|t| eval(t, alpha), &w, DEFAULT_EPS).unwrap();
        let fd_a = finite_diff_scalar(|a| eval(&w, a), alpha, DEFAULT_EPS).unwrap();
        assert!(max_rel_error(tape.grad(wv).unwrap(), &fd_w) <= 1e-6);
        assert!(max_rel_error(tape.grad(av).unwrap(), &[fd_a]) <= 1e-6);
    }

    fn arb_weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, 2..40)
    }

    proptest! {
        #[test]
        fn losses_nonnegative(w in arb_weights(), m in -1.0f64..1.0, alpha in 0.0f64..60.0) {
            let w = t(&w);
            prop_assert!(linf_loss(&[&w]).unwrap() >= 0.0);
            prop_assert!(margin_loss(&w, m).unwrap() >= 0.0);
            prop_assert!(smm_loss(&w, alpha).unwrap() >= 0.0);
        }

        #[test]
        fn margin_at_zero_is_l1(w in arb_weights()) {
            let w = t(&w);
            let l1: f64 = w.data().iter().map(|v| v.abs()).sum();
            prop_assert!((margin_loss(&w, 0.0).unwrap() - l1).abs() <= 1e-12);
        }

        #[test]
        fn soft_extremes_bracketed(w in arb_weights(), alpha in 0.0f64..80.0) {
            let s = soft_extremes(&w, alpha);
            let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tol = 1e-12;
            prop_assert!(lo - tol <= s.s_min && s.s_min <= s.s_max + tol && s.s_max <= hi + tol);
        }

        #[test]
        fn linf_scales_with_abs_factor(w in arb_weights(), c in -4.0f64..4.0) {
            let w = t(&w);
            let scaled = w.map(|v| c * v);
            prop_assert_eq!(linf_loss(&[&scaled]).unwrap(), c.abs() * linf_loss(&[&w]).unwrap());
        }

        #[test]
        fn linf_zero_iff_all_zero(w in arb_weights()) {
            let w = t(&w);
            let zero = w.data().iter().all(|&v| v == 0.0);
            prop_assert_eq!(linf_loss(&[&w]).unwrap() == 0.0, zero);
        }
    }
}
