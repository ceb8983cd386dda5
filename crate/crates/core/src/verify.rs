//! Oracle suites run on demand: analytic gradients against central finite
//! differences, soft-min-max limits, and DKM against Lloyd's k-means.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::finite_diff::{finite_diff, finite_diff_scalar, max_rel_error, DEFAULT_EPS};
use crate::palettizers::{dkm_forward, dkm_hard_snapshot, group_weights, lloyd_step};
use crate::quantizers::{lsq_grad_scale, lsq_grads, pact_clip, Levels};
use crate::regularizers::{linf_grad, linf_loss, margin_grad, margin_loss, smm_grad, smm_loss};
use crate::tensor::Tensor;

/// Random instances per property.
pub const INSTANCES: usize = 100;
pub const GRAD_TOL: f64 = 1e-5;
pub const DKM_GRAD_TOL: f64 = 1e-4;
pub const SMM_LIMIT_ALPHA: f64 = 50.0;
pub const SMM_LIMIT_TOL: f64 = 1e-6;
pub const SMM_ALPHA_GRID: [f64; 5] = [0.0, 1.0, 5.0, 20.0, 50.0];
pub const LLOYD_TAU: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(suite: &'static str, name: &str, passed: bool, detail: String) -> Self {
        Check { suite, name: name.to_string(), passed, detail }
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("[{verdict}] {}/{}: {}", self.suite, self.name, self.detail)
    }
}

pub type MarginGradFn = fn(&Tensor, f64) -> Result<(Tensor, f64)>;

/// Gradient implementations under test; swapped out by mutation tests.
#[derive(Clone, Copy)]
pub struct GradOps {
    pub margin_grad: MarginGradFn,
}

impl Default for GradOps {
    fn default() -> Self {
        GradOps { margin_grad }
    }
}

fn tensor(v: Vec<f64>) -> Tensor {
    Tensor::from_vec(v)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Worst relative error over `INSTANCES` kink-free draws of `instance`,
/// which returns `None` for a rejected draw.
fn worst_error(seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> Result<Option<f64>>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut accepted = 0;
    while accepted < INSTANCES {
        if let Some(e) = instance(&mut rng)? {
            worst = worst.max(e);
            accepted += 1;
        }
    }
    Ok(worst)
}

fn grad_check(name: &str, worst: f64, tol: f64) -> Check {
    Check::new("grad", name, worst <= tol, format!("max rel error {worst:.3e} (tol {tol:.0e}) over {INSTANCES} instances"))
}

/// Analytic gradients of every regularizer, the LSQ step, PACT and DKM
/// against central differences.
pub fn grad_suite(ops: GradOps) -> Result<Vec<Check>> {
    let mut out = Vec::new();

    // L∞ over a list of layers; kink-free = a unique |max| per layer.
    let worst = worst_error(101, |rng| {
        let layers: Vec<Vec<f64>> = (0..rng.random_range(1..4))
            .map(|_| {
                let n = rng.random_range(2..12);
                uniform_vec(rng, n, -1.0, 1.0)
            })
            .collect();
        for l in &layers {
            let mut a: Vec<f64> = l.iter().map(|v| v.abs()).collect();
            a.sort_by(|x, y| y.total_cmp(x));
            if a[0] - a[1] < 1e-3 || a[0] < 1e-3 {
                return Ok(None);
            }
        }
        let mut worst = 0.0f64;
        for (i, l) in layers.iter().enumerate() {
            let analytic = linf_grad(&tensor(l.clone()))?;
            let numeric = finite_diff(
                |t| {
                    let ts: Vec<Tensor> = layers
                        .iter()
                        .enumerate()
                        .map(|(j, o)| if j == i { t.clone() } else { tensor(o.clone()) })
                        .collect();
                    linf_loss(&ts.iter().collect::<Vec<_>>())
                },
                &tensor(l.clone()),
                DEFAULT_EPS,
            )?;
            worst = worst.max(max_rel_error(analytic.data(), &numeric));
        }
        Ok(Some(worst))
    })?;
    out.push(grad_check("linf_dW", worst, GRAD_TOL));

    // Margin: away from |w| = |M| and from w = 0, M = 0.
    let margin_instance = |rng: &mut ChaCha8Rng| -> Option<(Vec<f64>, f64)> {
        let n = rng.random_range(2..16);
        let w = uniform_vec(rng, n, -1.0, 1.0);
        let m: f64 = rng.random_range(-0.8..0.8);
        let clear = m.abs() > 1e-3 && w.iter().all(|v| v.abs() > 1e-3 && (v.abs() - m.abs()).abs() > 1e-3);
        clear.then_some((w, m))
    };
    let worst_w = worst_error(102, |rng| {
        let Some((w, m)) = margin_instance(rng) else { return Ok(None) };
        let (dw, _) = (ops.margin_grad)(&tensor(w.clone()), m)?;
        let numeric = finite_diff(|t| margin_loss(t, m), &tensor(w), DEFAULT_EPS)?;
        Ok(Some(max_rel_error(dw.data(), &numeric)))
    })?;
    out.push(grad_check("margin_dW", worst_w, GRAD_TOL));
    let worst_m = worst_error(103, |rng| {
        let Some((w, m)) = margin_instance(rng) else { return Ok(None) };
        let t = tensor(w);
        let (_, dm) = (ops.margin_grad)(&t, m)?;
        let numeric = finite_diff_scalar(|x| margin_loss(&t, x), m, DEFAULT_EPS)?;
        Ok(Some(max_rel_error(&[dm], &[numeric])))
    })?;
    out.push(grad_check("margin_dM", worst_m, GRAD_TOL));

    // Soft-min-max is smooth everywhere.
    let smm_instance = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(2..16);
        (uniform_vec(rng, n, -1.0, 1.0), rng.random_range(0.0..20.0))
    };
    let worst_w = worst_error(104, |rng| {
        let (w, alpha) = smm_instance(rng);
        let (dw, _) = smm_grad(&tensor(w.clone()), alpha)?;
        let numeric = finite_diff(|t| smm_loss(t, alpha), &tensor(w), DEFAULT_EPS)?;
        Ok(Some(max_rel_error(dw.data(), &numeric)))
    })?;
    out.push(grad_check("smm_dW", worst_w, GRAD_TOL));
    let worst_a = worst_error(105, |rng| {
        let (w, alpha) = smm_instance(rng);
        let alpha = alpha.max(2.0 * DEFAULT_EPS);
        let t = tensor(w);
        let (_, da) = smm_grad(&t, alpha)?;
        let numeric = finite_diff_scalar(|a| smm_loss(&t, a), alpha, DEFAULT_EPS)?;
        Ok(Some(max_rel_error(&[da], &[numeric])))
    })?;
    out.push(grad_check("smm_dalpha", worst_a, GRAD_TOL));

    // LSQ step gradient against the straight-through surrogate
    // s·(clamp(w/s) + stop(round − clamp)), away from the clip kinks.
    let worst = worst_error(106, |rng| {
        let bits = rng.random_range(2..=4);
        let n = rng.random_range(3..20);
        let s = rng.random_range(0.05..0.5);
        let w = uniform_vec(rng, n, -1.5, 1.5);
        let g = uniform_vec(rng, n, -1.0, 1.0);
        let lv = Levels::for_bits(bits)?;
        let (qn, qp) = (lv.q_n as f64, lv.q_p as f64);
        let kink_free = w.iter().all(|&v| {
            let r = v / s;
            let margin = 10.0 * r.abs() * DEFAULT_EPS / s + 1e-6;
            (r + qn).abs() > margin && (r - qp).abs() > margin
        });
        if !kink_free {
            return Ok(None);
        }
        let (_, ds) = lsq_grads(&g, &w, bits, s, n)?;
        let ds = ds / lsq_grad_scale(n, lv);
        let objective = |x: f64| -> Result<f64> {
            Ok(w.iter()
                .zip(&g)
                .map(|(&v, &gv)| {
                    let frozen = (v / s).clamp(-qn, qp);
                    x * ((v / x).clamp(-qn, qp) + frozen.round() - frozen) * gv
                })
                .sum())
        };
        let numeric = finite_diff_scalar(objective, s, DEFAULT_EPS)?;
        Ok(Some(max_rel_error(&[ds], &[numeric])))
    })?;
    out.push(grad_check("lsq_dstep", worst, GRAD_TOL));

    // PACT: away from x = 0 and x = clip.
    let pact_instance = |rng: &mut ChaCha8Rng| {
        let clip = rng.random_range(0.2..2.0);
        let x = uniform_vec(rng, 12, -1.0, 3.0);
        let g = uniform_vec(rng, 12, -1.0, 1.0);
        let clear = x.iter().all(|&v| v.abs() > 1e-3 && (v - clip).abs() > 1e-3);
        clear.then_some((x, g, clip))
    };
    let pact_obj = |x: &[f64], g: &[f64], a: f64| -> f64 { x.iter().zip(g).map(|(v, gv)| v.clamp(0.0, a) * gv).sum() };
    let worst_x = worst_error(107, |rng| {
        let Some((x, g, clip)) = pact_instance(rng) else { return Ok(None) };
        let (_, dx, _) = pact_clip(&x, &g, clip)?;
        let numeric = finite_diff(|t| Ok(pact_obj(t.data(), &g, clip)), &tensor(x), DEFAULT_EPS)?;
        Ok(Some(max_rel_error(&dx, &numeric)))
    })?;
    out.push(grad_check("pact_dx", worst_x, GRAD_TOL));
    let worst_a = worst_error(108, |rng| {
        let Some((x, g, clip)) = pact_instance(rng) else { return Ok(None) };
        let (_, _, da) = pact_clip(&x, &g, clip)?;
        let numeric = finite_diff_scalar(|a| Ok(pact_obj(&x, &g, a)), clip, DEFAULT_EPS)?;
        Ok(Some(max_rel_error(&[da], &[numeric])))
    })?;
    out.push(grad_check("pact_dclip", worst_a, GRAD_TOL));

    // DKM forward/backward through the full soft path.
    let worst = worst_error(109, |rng| {
        let dim = rng.random_range(1..3);
        let k = [2, 4][rng.random_range(0..2)];
        let n = rng.random_range(2 * k..4 * k + 4) * dim;
        let w = uniform_vec(rng, n, -1.0, 1.0);
        let probe = uniform_vec(rng, n, -1.0, 1.0);
        let c0 = uniform_vec(rng, k * dim, -1.0, 1.0);
        let tau = rng.random_range(0.05..1.0);
        let f = dkm_forward(&w, &c0, dim, tau)?;
        let analytic = f.backward(&probe);
        let numeric = finite_diff(
            |t| Ok(dkm_forward(t.data(), &c0, dim, tau)?.w_hat.iter().zip(&probe).map(|(a, b)| a * b).sum()),
            &tensor(w),
            DEFAULT_EPS,
        )?;
        Ok(Some(max_rel_error(&analytic, &numeric)))
    })?;
    out.push(grad_check("dkm_dW", worst, DKM_GRAD_TOL));
    Ok(out)
}

/// Largest gap between an extreme and its nearest neighbour required for
/// the draw: at least 0.01 on both ends.
fn extremes_separated(w: &[f64], gap: f64) -> bool {
    let mut s = w.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    s[n - 1] - s[n - 2] >= gap && s[1] - s[0] >= gap
}

/// Random tensors with range ≥ 0.1 and unique extrema separated ≥ 0.01.
pub fn smm_limit_instances(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(INSTANCES);
    while out.len() < INSTANCES {
        let n = rng.random_range(2..33);
        let w = uniform_vec(&mut rng, n, -1.0, 1.0);
        let range = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - w.iter().cloned().fold(f64::INFINITY, f64::min);
        if range >= 0.1 && extremes_separated(&w, 0.01) {
            out.push(w);
        }
    }
    out
}

/// `|smm_loss(W, α) − (range(W) + e^{−α})|`.
pub fn smm_limit_gap(w: &[f64], alpha: f64) -> Result<f64> {
    let range = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - w.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok((smm_loss(&tensor(w.to_vec()), alpha)? - (range + (-alpha).exp())).abs())
}

/// Soft-min-max convergence to the range as α grows.
pub fn limits_suite() -> Result<Vec<Check>> {
    let instances = smm_limit_instances(201);
    let mut worst = 0.0f64;
    let mut violations = 0;
    let mut monotone = true;
    for w in &instances {
        let gaps: Vec<f64> = SMM_ALPHA_GRID.iter().map(|&a| smm_limit_gap(w, a)).collect::<Result<_>>()?;
        let g50 = smm_limit_gap(w, SMM_LIMIT_ALPHA)?;
        worst = worst.max(g50);
        if g50 > SMM_LIMIT_TOL {
            violations += 1;
        }
        // the gap to the limit never grows along the grid (tiny slack for rounding)
        monotone &= gaps.windows(2).all(|p| p[1] <= p[0] + 1e-12);
    }
    Ok(vec![
        Check::new(
            "limits",
            "smm_alpha50_within_1e-6",
            violations == 0,
            format!(
                "max |smm(W,50) − (range + e^-50)| = {worst:.3e} (tol {SMM_LIMIT_TOL:.0e}); {violations}/{} instances exceed it",
                instances.len()
            ),
        ),
        Check::new(
            "limits",
            "smm_monotone_on_alpha_grid",
            monotone,
            format!("gap to range + e^-α non-increasing over α ∈ {SMM_ALPHA_GRID:?} for all {} instances", instances.len()),
        ),
    ])
}

/// One instance of the DKM–Lloyd comparison: scalar data and a codebook
/// whose centroids are at least 1e-3 apart.
pub fn lloyd_instance(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>) {
    loop {
        let n = rng.random_range(k..8 * k + 8);
        let w = uniform_vec(rng, n, -1.0, 1.0);
        let c = uniform_vec(rng, k, -1.0, 1.0);
        let mut s = c.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|p| p[1] - p[0] >= 1e-3) {
            return (w, c);
        }
    }
}

/// Smallest `(d²_second − d²_nearest) / τ` over all points: how decisively
/// the softmax at temperature `tau` picks a single centroid.
pub fn min_assignment_margin(w: &[f64], codebook: &[f64], tau: f64) -> f64 {
    w.iter()
        .map(|&x| {
            let mut d: Vec<f64> = codebook.iter().map(|c| (x - c).powi(2)).collect();
            d.sort_by(f64::total_cmp);
            (d[1] - d[0]) / tau
        })
        .fold(f64::INFINITY, f64::min)
}

/// Attention margin beyond which a point's runner-up weight (< e^-40)
/// cannot move a centroid by more than about 1e-17.
pub const DECISIVE_MARGIN: f64 = 40.0;

/// DKM at τ = 1e-6 against one Lloyd step. Assignments must match exactly
/// on every instance; centroids must match to 1e-9 on instances without
/// near-ties, where the softmax is numerically one-hot.
pub fn palette_suite() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let (mut index_mismatch, mut worst_decisive, mut worst_tied, mut tied) = (0, 0.0f64, 0.0f64, 0);
    let ks = [2usize, 4, 16];
    for i in 0..INSTANCES {
        let (w, c) = lloyd_instance(&mut rng, ks[i % ks.len()]);
        let groups = group_weights(&w, 1)?;
        let (a_dkm, c_dkm) = dkm_hard_snapshot(&groups, &c, LLOYD_TAU)?;
        let (a_lloyd, c_lloyd) = lloyd_step(&groups, &c);
        if a_dkm != a_lloyd {
            index_mismatch += 1;
        }
        let diff = c_dkm.iter().zip(&c_lloyd).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if min_assignment_margin(&w, &c, LLOYD_TAU) >= DECISIVE_MARGIN {
            worst_decisive = worst_decisive.max(diff);
        } else {
            tied += 1;
            worst_tied = worst_tied.max(diff);
        }
    }
    Ok(vec![
        Check::new(
            "palette",
            "dkm_lloyd_assignments",
            index_mismatch == 0,
            format!("{index_mismatch}/{INSTANCES} instances with differing assignments (k ∈ {ks:?})"),
        ),
        Check::new(
            "palette",
            "dkm_lloyd_centroids",
            worst_decisive <= 1e-9,
            format!(
                "max centroid difference {worst_decisive:.3e} (tol 1e-9) on {} decisive instances; \
                 {tied} near-tie instances differ by up to {worst_tied:.3e}",
                INSTANCES - tied
            ),
        ),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Limits,
    Palette,
    All,
}

pub fn run_suite(suite: Suite, ops: GradOps) -> Result<Vec<Check>> {
    Ok(match suite {
        Suite::Grad => grad_suite(ops)?,
        Suite::Limits => limits_suite()?,
        Suite::Palette => palette_suite()?,
        Suite::All => {
            let mut v = grad_suite(ops)?;
            v.extend(limits_suite()?);
            v.extend(palette_suite()?);
            v
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped_margin_grad(w: &Tensor, m: f64) -> Result<(Tensor, f64)> {
        let (dw, dm) = margin_grad(w, m)?;
        Ok((dw.map(|v| -v), dm))
    }

    #[test]
    fn grad_suite_passes() {
        for c in grad_suite(GradOps::default()).unwrap() {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn grad_suite_catches_sign_error() {
        let checks = grad_suite(GradOps { margin_grad: flipped_margin_grad }).unwrap();
        let margin = checks.iter().find(|c| c.name == "margin_dW").unwrap();
        assert!(!margin.passed);
    }

    #[test]
    fn palette_suite_passes() {
        for c in palette_suite().unwrap() {
            println!("{}", c.line());
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn smm_monotone_part_passes() {
        let checks = limits_suite().unwrap();
        println!("{}\n{}", checks[0].line(), checks[1].line());
        assert!(checks[1].passed, "{}", checks[1].line());
    }

    #[test]
    fn smm_limit_holds_once_extremes_are_well_separated() {
        // gaps of 0.4 put every neighbour weight below e^-20 at α = 50
        let w = [-0.6, -0.2, 0.0, 0.1, 0.5];
        assert!(smm_limit_gap(&w, 50.0).unwrap() <= 1e-6);
    }

    #[test]
    fn instances_respect_constraints() {
        for w in smm_limit_instances(5) {
            assert!(extremes_separated(&w, 0.01));
        }
    }
}
