//! Weight palettization: per-layer codebooks of `2^b` centroids in `d`
//! dimensions, fitted by Lloyd's k-means or trained through differentiable
//! k-means (soft attention assignments), plus compressed-size accounting.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// Column mass below which a soft centroid keeps its previous value.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// Row-major weights chunked into `d`-vectors, zero-padded at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct Groups {
    /// `n × d`, row-major.
    pub data: Vec<f64>,
    pub dim: usize,
    pub pad: usize,
}

impl Groups {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Flattens back to the original weight count, dropping padding.
    pub fn ungroup(&self) -> Vec<f64> {
        self.data[..self.data.len() - self.pad].to_vec()
    }

    pub fn from_rows(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of {dim}", data.len())));
        }
        Ok(Groups { data, dim, pad: 0 })
    }
}

pub fn group_weights(w: &[f64], dim: usize) -> Result<Groups> {
    if dim == 0 {
        return Err(Error::Domain("group dimension must be ≥ 1".into()));
    }
    let pad = (dim - w.len() % dim) % dim;
    let mut data = w.to_vec();
    data.resize(w.len() + pad, 0.0);
    Ok(Groups { data, dim, pad })
}

/// `exp(x)` for `x ≤ 0`, flushing deep underflow to zero without taking
/// the slow path of `exp`.
#[inline]
fn softmax_term(x: f64) -> f64 {
    if x < -50.0 {
        0.0
    } else {
        x.exp()
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per group (lowest index on ties) and the total SSE.
pub fn assign_nearest(groups: &Groups, codebook: &[f64]) -> (Vec<usize>, f64) {
    let d = groups.dim;
    let k = codebook.len() / d;
    let mut sse = 0.0;
    let assignments = (0..groups.len())
        .map(|i| {
            let g = groups.row(i);
            let (best, dist) = (0..k)
                .map(|j| (j, sq_dist(g, &codebook[j * d..(j + 1) * d])))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            sse += dist;
            best
        })
        .collect();
    (assignments, sse)
}

/// Per-cluster sums and counts for a hard assignment.
fn cluster_sums(groups: &Groups, assignments: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let d = groups.dim;
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        sums[a * d..(a + 1) * d].iter_mut().zip(groups.row(i)).for_each(|(s, v)| *s += v);
    }
    (sums, counts)
}

/// One Lloyd iteration: nearest assignment, then cluster means. Empty
/// clusters keep their previous centroid.
pub fn lloyd_step(groups: &Groups, codebook: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let d = groups.dim;
    let k = codebook.len() / d;
    let (assignments, _) = assign_nearest(groups, codebook);
    let (sums, counts) = cluster_sums(groups, &assignments, k);
    let mut next = codebook.to_vec();
    for j in 0..k {
        if counts[j] > 0 {
            for t in 0..d {
                next[j * d + t] = sums[j * d + t] / counts[j] as f64;
            }
        }
    }
    (assignments, next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// `k × d`, row-major.
    pub codebook: Vec<f64>,
    pub assignments: Vec<usize>,
    /// SSE measured at the start of every iteration and after the final assignment.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

fn kmeans_pp_init(groups: &Groups, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = groups.dim;
    let n = groups.len();
    let mut codebook = Vec::with_capacity(k * d);
    codebook.extend_from_slice(groups.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(groups.row(i), &codebook[..d])).collect();
    while codebook.len() < k * d {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            nearest
                .iter()
                .position(|&v| {
                    acc += v;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let start = codebook.len();
        codebook.extend_from_slice(groups.row(pick));
        let c = codebook[start..].to_vec();
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq_dist(groups.row(i), &c));
        }
    }
    codebook
}

/// Lloyd's k-means from a seeded k-means++ start.
pub fn kmeans_fit(
    groups: &Groups,
    k: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<KMeansFit> {
    if k == 0 || k > groups.len() {
        return Err(Error::Domain(format!("k = {k} with {} groups", groups.len())));
    }
    if max_iter == 0 {
        return Err(Error::Domain("max_iter must be ≥ 1".into()));
    }
    let d = groups.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codebook = kmeans_pp_init(groups, k, &mut rng);
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let (assignments, sse) = assign_nearest(groups, &codebook);
        push_monotone(&mut sse_history, sse);
        let (sums, counts) = cluster_sums(groups, &assignments, k);
        let mut next = vec![0.0; k * d];
        let mut taken = vec![false; groups.len()];
        for j in 0..k {
            if counts[j] > 0 {
                for t in 0..d {
                    next[j * d + t] = sums[j * d + t] / counts[j] as f64;
                }
                continue;
            }
            // Re-seed an empty cluster at the point farthest from its centroid.
            let far = (0..groups.len())
                .filter(|&i| !taken[i])
                .map(|i| {
                    let a = assignments[i];
                    (i, sq_dist(groups.row(i), &codebook[a * d..(a + 1) * d]))
                })
                .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                .0;
            taken[far] = true;
            next[j * d..(j + 1) * d].copy_from_slice(groups.row(far));
        }
        let shift = (0..k)
            .map(|j| sq_dist(&next[j * d..(j + 1) * d], &codebook[j * d..(j + 1) * d]).sqrt())
            .fold(0.0, f64::max);
        codebook = next;
        if shift < tol {
            break;
        }
    }
    let (assignments, sse) = assign_nearest(groups, &codebook);
    push_monotone(&mut sse_history, sse);
    Ok(KMeansFit { codebook, assignments, sse_history, iterations })
}

fn push_monotone(history: &mut Vec<f64>, sse: f64) {
    if let Some(&prev) = history.last() {
        assert!(
            sse <= prev + 1e-12 * prev.abs().max(1.0),
            "k-means SSE increased from {prev} to {sse}"
        );
    }
    history.push(sse);
}

/// Soft assignments `A_ij = softmax_j(−‖g_i − c_j‖² / τ)`, `n × k`.
pub fn dkm_attention(groups: &Groups, codebook: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(attention(groups, codebook, tau))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be finite and > 0, got {tau}")));
    }
    Ok(())
}

fn attention(groups: &Groups, codebook: &[f64], tau: f64) -> Vec<f64> {
    let d = groups.dim;
    let k = codebook.len() / d;
    let inv_tau = 1.0 / tau;
    let mut a = vec![0.0; groups.len() * k];
    for (row, g) in a.chunks_exact_mut(k).zip(groups.data.chunks_exact(d)) {
        let mut top = f64::NEG_INFINITY;
        for (r, c) in row.iter_mut().zip(codebook.chunks_exact(d)) {
            *r = -sq_dist(g, c) * inv_tau;
            top = top.max(*r);
        }
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = softmax_term(*r - top);
            z += *r;
        }
        let inv_z = 1.0 / z;
        row.iter_mut().for_each(|r| *r *= inv_z);
    }
    a
}

/// Attention-weighted centroid update. Returns the new codebook and, per
/// centroid, whether it kept its previous value (degenerate column).
fn soft_update(groups: &Groups, codebook: &[f64], a: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let d = groups.dim;
    let k = codebook.len() / d;
    let mut mass = vec![0.0; k];
    let mut sums = vec![0.0; k * d];
    for (row, g) in a.chunks_exact(k).zip(groups.data.chunks_exact(d)) {
        for ((&w, m), s) in row.iter().zip(mass.iter_mut()).zip(sums.chunks_exact_mut(d)) {
            if w == 0.0 {
                continue;
            }
            *m += w;
            s.iter_mut().zip(g).for_each(|(s, v)| *s += w * v);
        }
    }
    let mut next = codebook.to_vec();
    let mut kept = vec![false; k];
    for j in 0..k {
        if mass[j] < DEGENERATE_MASS {
            kept[j] = true;
        } else {
            for t in 0..d {
                next[j * d + t] = sums[j * d + t] / mass[j];
            }
        }
    }
    (next, mass, kept)
}

/// One differentiable k-means iteration: `c'_j = Σ_i A_ij g_i / Σ_i A_ij`.
pub fn dkm_iterate(groups: &Groups, codebook: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_tau(tau)?;
    let a = attention(groups, codebook, tau);
    let (next, _, _) = soft_update(groups, codebook, &a);
    Ok((next, a))
}

/// Argmax assignments of the attention plus the attention-weighted update.
pub fn dkm_hard_snapshot(
    groups: &Groups,
    codebook: &[f64],
    tau: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (next, a) = dkm_iterate(groups, codebook, tau)?;
    let k = codebook.len() / groups.dim;
    let assignments = a
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0
        })
        .collect();
    Ok((assignments, next))
}

/// Intermediates of the soft forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DkmForward {
    groups: Groups,
    codebook0: Vec<f64>,
    a0: Vec<f64>,
    mass: Vec<f64>,
    kept: Vec<bool>,
    /// Codebook after the soft update; becomes the palette for the next step.
    pub codebook: Vec<f64>,
    a1: Vec<f64>,
    tau: f64,
    /// Reconstructed weights `A1·C1` with padding removed.
    pub w_hat: Vec<f64>,
}

/// Soft palettized forward: update the codebook from `codebook0` with one
/// attention iteration, then reconstruct every group as `Σ_j A_ij c_j`.
pub fn dkm_forward(w: &[f64], codebook0: &[f64], dim: usize, tau: f64) -> Result<DkmForward> {
    check_tau(tau)?;
    if codebook0.is_empty() || !codebook0.len().is_multiple_of(dim) {
        return Err(Error::Shape(format!("codebook of {} values for dim {dim}", codebook0.len())));
    }
    let groups = group_weights(w, dim)?;
    let k = codebook0.len() / dim;
    let a0 = attention(&groups, codebook0, tau);
    let (codebook, mass, kept) = soft_update(&groups, codebook0, &a0);
    let a1 = attention(&groups, &codebook, tau);
    let mut rec = vec![0.0; groups.data.len()];
    for (r, row) in rec.chunks_exact_mut(dim).zip(a1.chunks_exact(k)) {
        for (&a, c) in row.iter().zip(codebook.chunks_exact(dim)).filter(|(&a, _)| a != 0.0) {
            r.iter_mut().zip(c).for_each(|(r, c)| *r += a * c);
        }
    }
    rec.truncate(w.len());
    Ok(DkmForward {
        groups,
        codebook0: codebook0.to_vec(),
        a0,
        mass,
        kept,
        codebook,
        a1,
        tau,
        w_hat: rec,
    })
}

impl DkmForward {
    /// Gradient with respect to the original weights through both the
    /// reconstruction attention and the soft centroid update.
    pub fn backward(&self, grad_w_hat: &[f64]) -> Vec<f64> {
        let g = &self.groups;
        let (n, d) = (g.len(), g.dim);
        let k = self.codebook.len() / d;
        let c1 = &self.codebook;
        let mut up = grad_w_hat.to_vec();
        up.resize(n * d, 0.0);

        let mut dg = vec![0.0; n * d];
        let mut dc1 = vec![0.0; k * d];
        let mut da = vec![0.0; k];
        // ĝ_i = Σ_j A1_ij c1_j
        let inv_tau = 1.0 / self.tau;
        for (((gi, ui), row), dgi) in g
            .data
            .chunks_exact(d)
            .zip(up.chunks_exact(d))
            .zip(self.a1.chunks_exact(k))
            .zip(dg.chunks_exact_mut(d))
        {
            for (x, c) in da.iter_mut().zip(c1.chunks_exact(d)) {
                *x = dot(ui, c);
            }
            let mean_da: f64 = row.iter().zip(&da).map(|(a, x)| a * x).sum();
            for (((&a, &daj), c), dcj) in row.iter().zip(&da).zip(c1.chunks_exact(d)).zip(dc1.chunks_exact_mut(d)) {
                if a == 0.0 {
                    continue;
                }
                // softmax backward, then through D1_ij = ‖g_i − c1_j‖², logits −D1/τ
                let dd2 = -2.0 * a * (daj - mean_da) * inv_tau;
                for t in 0..d {
                    let diff = gi[t] - c[t];
                    dcj[t] += a * ui[t] - dd2 * diff;
                    dgi[t] += dd2 * diff;
                }
            }
        }
        // c1_j = N_j / S_j with N_j = Σ_i A0_ij g_i, S_j = Σ_i A0_ij
        let mut dn = vec![0.0; k * d];
        let mut ds = vec![0.0; k];
        for j in 0..k {
            if self.kept[j] {
                continue;
            }
            let s = self.mass[j];
            for t in 0..d {
                dn[j * d + t] = dc1[j * d + t] / s;
            }
            ds[j] = -dot(&dc1[j * d..(j + 1) * d], &c1[j * d..(j + 1) * d]) / s;
        }
        let c0 = &self.codebook0;
        for ((gi, row), dgi) in g.data.chunks_exact(d).zip(self.a0.chunks_exact(k)).zip(dg.chunks_exact_mut(d)) {
            for ((x, n), s) in da.iter_mut().zip(dn.chunks_exact(d)).zip(&ds) {
                *x = dot(gi, n) + s;
            }
            let mean_da: f64 = row.iter().zip(&da).map(|(a, x)| a * x).sum();
            for (((&a, &daj), n), c) in row.iter().zip(&da).zip(dn.chunks_exact(d)).zip(c0.chunks_exact(d)) {
                if a == 0.0 {
                    continue;
                }
                let dd2 = -2.0 * a * (daj - mean_da) * inv_tau;
                for t in 0..d {
                    dgi[t] += a * n[t] + dd2 * (gi[t] - c[t]);
                }
            }
        }
        dg.truncate(n * d - g.pad);
        dg
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct DkmOp {
    forward: DkmForward,
}

impl CustomOp for DkmOp {
    fn name(&self) -> &str {
        "dkm_palettize"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(self.forward.backward(g))]
    }
}

/// Records the soft palettized weight on the tape and returns it together
/// with the updated codebook.
pub fn dkm_on_tape(
    tape: &mut Tape,
    w: Var,
    codebook: &[f64],
    dim: usize,
    tau: f64,
) -> Result<(Var, Vec<f64>)> {
    let wt = tape.value(w);
    let forward = dkm_forward(wt.data(), codebook, dim, tau)?;
    let out = Tensor::new(wt.shape().to_vec(), forward.w_hat.clone())?;
    let next = forward.codebook.clone();
    let v = tape.custom(&[w], out, Box::new(DkmOp { forward }))?;
    Ok((v, next))
}

/// A layer's codebook and hard assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub layer_name: String,
    pub bits: u32,
    pub dim: usize,
    /// `2^bits × dim`, row-major.
    pub codebook: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Zero entries appended to the flattened weights before grouping.
    pub pad: usize,
}

impl Palette {
    pub fn k(&self) -> usize {
        1 << self.bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook.len() != self.k() * self.dim {
            return Err(Error::Consistency(format!(
                "{}: codebook holds {} values, expected {}",
                self.layer_name,
                self.codebook.len(),
                self.k() * self.dim
            )));
        }
        if let Some(&bad) = self.assignments.iter().find(|&&a| a >= self.k()) {
            return Err(Error::Consistency(format!(
                "{}: assignment {bad} outside codebook of {}",
                self.layer_name,
                self.k()
            )));
        }
        if self.pad >= self.dim {
            return Err(Error::Consistency(format!("{}: pad {} ≥ dim", self.layer_name, self.pad)));
        }
        Ok(())
    }

    /// Flattened weights with padding removed.
    pub fn reconstruct(&self) -> Vec<f64> {
        let d = self.dim;
        let mut out: Vec<f64> = self
            .assignments
            .iter()
            .flat_map(|&a| self.codebook[a * d..(a + 1) * d].iter().copied())
            .collect();
        out.truncate(out.len() - self.pad);
        out
    }

    /// Hard palette for `w` by nearest-centroid assignment to `codebook`.
    pub fn from_codebook(layer: &str, w: &[f64], bits: u32, dim: usize, codebook: Vec<f64>) -> Result<Self> {
        let groups = group_weights(w, dim)?;
        let (assignments, _) = assign_nearest(&groups, &codebook);
        let p = Palette {
            layer_name: layer.to_string(),
            bits,
            dim,
            codebook,
            assignments,
            pad: groups.pad,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Fits a `2^bits`-entry palette to a layer with k-means.
pub fn palettize(layer: &str, w: &[f64], bits: u32, dim: usize, seed: u64) -> Result<Palette> {
    validate_spec(layer, bits, dim, w.len())?;
    let groups = group_weights(w, dim)?;
    let fit = kmeans_fit(&groups, 1 << bits, 100, 1e-10, seed)?;
    Ok(Palette {
        layer_name: layer.to_string(),
        bits,
        dim,
        codebook: fit.codebook,
        assignments: fit.assignments,
        pad: groups.pad,
    })
}

/// Checks that a `{bits, dim}` palette fits a layer of `params` weights.
pub fn validate_spec(layer: &str, bits: u32, dim: usize, params: usize) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::Config(format!("{layer}: palette bits must be in [1, 16], got {bits}")));
    }
    if dim == 0 {
        return Err(Error::Config(format!("{layer}: palette dim must be ≥ 1")));
    }
    let groups = params.div_ceil(dim);
    if (1usize << bits) > groups {
        return Err(Error::Config(format!(
            "{layer}: {} centroids exceed {groups} weight groups",
            1usize << bits
        )));
    }
    Ok(())
}

/// Packs indices of `bits` width into little-endian bitfields.
pub fn pack_indices(indices: &[usize], bits: u32) -> Vec<u8> {
    let total_bits = indices.len() * bits as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut pos = 0usize;
    for &idx in indices {
        for b in 0..bits as usize {
            if (idx >> b) & 1 == 1 {
                out[pos / 8] |= 1 << (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_indices(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<usize>> {
    let needed = (count * bits as usize).div_ceil(8);
    if bytes.len() < needed {
        return Err(Error::Format(format!(
            "{} bytes cannot hold {count} indices of {bits} bits",
            bytes.len()
        )));
    }
    let mut pos = 0usize;
    Ok((0..count)
        .map(|_| {
            let mut v = 0usize;
            for b in 0..bits as usize {
                if (bytes[pos / 8] >> (pos % 8)) & 1 == 1 {
                    v |= 1 << b;
                }
                pos += 1;
            }
            v
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Compression {
    Float,
    Palette { bits: u32, dim: usize },
}

/// A tensor to account for in a size report.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeEntry {
    pub name: String,
    pub params: usize,
    /// Conv/linear weights; everything else is stored at full precision.
    pub palettizable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSize {
    pub name: String,
    pub params: usize,
    pub bits: Option<u32>,
    pub dim: Option<usize>,
    pub codebook_bytes: u64,
    pub index_bytes: u64,
    pub float_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub fp_bits: u32,
    pub layers: Vec<LayerSize>,
    pub codebook_bytes: u64,
    pub index_bytes: u64,
    pub float_bytes: u64,
    pub total_bytes: u64,
}

/// Palettized weights cost `ceil(⌈params/d⌉·b / 8)` index bytes plus
/// `2^b·d·fp_bits/8` codebook bytes; all other tensors cost `fp_bits` each.
pub fn size_report(
    entries: &[SizeEntry],
    config: &BTreeMap<String, Compression>,
    fp_bits: u32,
) -> Result<SizeReport> {
    if fp_bits == 0 || !fp_bits.is_multiple_of(8) {
        return Err(Error::Config(format!("fp_bits must be a positive multiple of 8, got {fp_bits}")));
    }
    let fp_bytes = (fp_bits / 8) as u64;
    let mut layers = Vec::with_capacity(entries.len());
    for e in entries {
        let compression = if e.palettizable {
            *config
                .get(&e.name)
                .ok_or_else(|| Error::Config(format!("no compression setting for layer {}", e.name)))?
        } else {
            Compression::Float
        };
        let layer = match compression {
            Compression::Float => LayerSize {
                name: e.name.clone(),
                params: e.params,
                bits: None,
                dim: None,
                codebook_bytes: 0,
                index_bytes: 0,
                float_bytes: e.params as u64 * fp_bytes,
                total_bytes: e.params as u64 * fp_bytes,
            },
            Compression::Palette { bits, dim } => {
                if dim == 0 || bits == 0 {
                    return Err(Error::Config(format!("{}: bits and dim must be ≥ 1", e.name)));
                }
                let index_bytes = (e.params.div_ceil(dim) as u64 * bits as u64).div_ceil(8);
                let codebook_bytes = (1u64 << bits) * dim as u64 * fp_bytes;
                LayerSize {
                    name: e.name.clone(),
                    params: e.params,
                    bits: Some(bits),
                    dim: Some(dim),
                    codebook_bytes,
                    index_bytes,
                    float_bytes: 0,
                    total_bytes: codebook_bytes + index_bytes,
                }
            }
        };
        layers.push(layer);
    }
    Ok(SizeReport {
        fp_bits,
        codebook_bytes: layers.iter().map(|l| l.codebook_bytes).sum(),
        index_bytes: layers.iter().map(|l| l.index_bytes).sum(),
        float_bytes: layers.iter().map(|l| l.float_bytes).sum(),
        total_bytes: layers.iter().map(|l| l.total_bytes).sum(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff::{finite_diff, max_rel_error};
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn grouping() {
        let g = group_weights(&[1., 2., 3., 4.], 2).unwrap();
        assert_eq!((g.data.clone(), g.pad), (vec![1., 2., 3., 4.], 0));
        let g = group_weights(&[1., 2., 3.], 2).unwrap();
        assert_eq!((g.data.clone(), g.pad), (vec![1., 2., 3., 0.], 1));
        assert_eq!(g.ungroup(), vec![1., 2., 3.]);
        let g = group_weights(&[5., 6.], 1).unwrap();
        assert_eq!((g.len(), g.pad), (2, 0));
        assert!(group_weights(&[1.0], 0).is_err());
    }

    #[test]
    fn kmeans_separated_pairs() {
        let g = group_weights(&[0.0, 0.1, 1.0, 1.1], 1).unwrap();
        let fit = kmeans_fit(&g, 2, 50, 1e-12, 3).unwrap();
        let mut c = fit.codebook.clone();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12 && (c[1] - 1.05).abs() < 1e-12);

        let fit = kmeans_fit(&g, 1, 10, 1e-12, 3).unwrap();
        assert!((fit.codebook[0] - 0.55).abs() < 1e-12);
        assert!(matches!(kmeans_fit(&g, 5, 10, 1e-9, 0), Err(Error::Domain(_))));
        assert!(kmeans_fit(&g, 2, 0, 1e-9, 0).is_err());
    }

    #[test]
    fn kmeans_sse_monotone_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let d = rng.random_range(1..4);
            let n = rng.random_range(20..200);
            let w: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = group_weights(&w, d).unwrap();
            let fit = kmeans_fit(&g, rng.random_range(2..8), 50, 0.0, rng.random()).unwrap();
            assert!(fit.sse_history.windows(2).all(|p| p[1] <= p[0] + 1e-12));
            assert!(fit.assignments.iter().all(|&a| a < fit.codebook.len() / d));
        }
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let g = group_weights(&[0.0; 10], 1).unwrap();
        let fit = kmeans_fit(&g, 4, 10, 1e-9, 1).unwrap();
        assert_eq!(fit.codebook, vec![0.0; 4]);
    }

    #[test]
    fn attention_examples() {
        let g = group_weights(&[0.0], 1).unwrap();
        let a = dkm_attention(&g, &[-1.0, 1.0], 0.3).unwrap();
        assert_eq!(a, vec![0.5, 0.5]);
        let g = group_weights(&[0.2, 0.9, -0.7], 1).unwrap();
        let a = dkm_attention(&g, &[-0.5, 0.0, 1.0], 1e-8).unwrap();
        assert_eq!(a, vec![0., 1., 0., 0., 0., 1., 1., 0., 0.]);
        assert!(matches!(dkm_attention(&g, &[0.0], 0.0), Err(Error::Domain(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w: Vec<f64> = (0..60).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = group_weights(&w, 3).unwrap();
        let c: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = dkm_attention(&g, &c, 0.2).unwrap();
        for row in a.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn dkm_iterate_limits() {
        let g = group_weights(&[0.0, 0.1, 1.0, 1.2], 1).unwrap();
        // one-hot attention reproduces the Lloyd update
        let (next, _) = dkm_iterate(&g, &[0.2, 0.9], 1e-9).unwrap();
        let (_, lloyd) = lloyd_step(&g, &[0.2, 0.9]);
        assert_eq!(next, lloyd);
        // uniform attention collapses every centroid to the global mean
        let (next, _) = dkm_iterate(&g, &[0.5, 0.5, 0.5], 1.0).unwrap();
        for c in next {
            assert!((c - 0.575).abs() < 1e-12);
        }
        // fixed point
        let g = group_weights(&[-0.3, 0.2, 0.2, -0.3, 0.7], 1).unwrap();
        let (next, _) = dkm_iterate(&g, &[-0.3, 0.2, 0.7], 1e-8).unwrap();
        for (a, b) in next.iter().zip([-0.3, 0.2, 0.7]) {
            assert!((a - b).abs() < 1e-9);
        }
        // an unreachable centroid keeps its value
        let g = group_weights(&[0.0, 0.01], 1).unwrap();
        let (next, _) = dkm_iterate(&g, &[0.0, 50.0], 1e-3).unwrap();
        assert_eq!(next[1], 50.0);
    }

    #[test]
    fn soft_reconstruction_matches_hard_at_tiny_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut w = Vec::new();
        for center in [-0.8, 0.1, 0.9] {
            w.extend((0..20).map(|_| center + rng.random_range(-0.02..0.02)));
        }
        let g = group_weights(&w, 1).unwrap();
        let fit = kmeans_fit(&g, 4, 100, 0.0, 5).unwrap();
        let hard = Palette {
            layer_name: "l".into(),
            bits: 2,
            dim: 1,
            codebook: fit.codebook.clone(),
            assignments: fit.assignments.clone(),
            pad: 0,
        }
        .reconstruct();
        let soft = dkm_forward(&w, &fit.codebook, 1, 1e-7).unwrap();
        assert!(soft.w_hat.iter().zip(&hard).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn one_centroid_per_group_reconstructs_exactly() {
        let w = [0.3, -0.2, 0.5, 0.9];
        let soft = dkm_forward(&w, &w, 1, 1e-6).unwrap();
        assert_eq!(soft.w_hat, w.to_vec());
        let w2 = [0.3, -0.2, 0.5, 0.9, 0.1, -0.6];
        let soft = dkm_forward(&w2, &w2, 2, 1e-6).unwrap();
        assert_eq!(soft.w_hat, w2.to_vec());
    }

    fn dkm_fd_check(w: &[f64], c0: &[f64], dim: usize, tau: f64, probe: &[f64]) -> f64 {
        let f = dkm_forward(w, c0, dim, tau).unwrap();
        let analytic = f.backward(probe);
        let numeric = finite_diff(
            |t| {
                let f = dkm_forward(t.data(), c0, dim, tau)?;
                Ok(f.w_hat.iter().zip(probe).map(|(a, b)| a * b).sum())
            },
            &Tensor::from_vec(w.to_vec()),
            1e-5,
        )
        .unwrap();
        max_rel_error(&analytic, &numeric)
    }

    #[test]
    fn dkm_backward_matches_finite_differences() {
        let w = [0.12, -0.4, 0.33, 0.05, -0.21, 0.5];
        let probe = [0.7, -1.1, 0.4, 0.9, -0.3, 0.2];
        assert!(dkm_fd_check(&w, &[-0.3, 0.3], 1, 0.05, &probe) <= 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..20 {
            let dim = rng.random_range(1..3);
            let n = rng.random_range(4..12);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let probe: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c0: Vec<f64> = (0..2 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let tau = rng.random_range(0.05..1.0);
            assert!(dkm_fd_check(&w, &c0, dim, tau, &probe) <= 1e-4);
        }
    }

    #[test]
    fn palette_validation_and_reconstruction() {
        let w = [0.1, 0.12, -0.5, -0.52, 0.9];
        let p = palettize("fc", &w, 1, 1, 1).unwrap();
        assert_eq!(p.k(), 2);
        assert_eq!(p.reconstruct().len(), 5);
        let mut distinct = p.reconstruct();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert!(distinct.len() <= 2);
        let mut bad = p.clone();
        bad.assignments[0] = 2;
        assert!(bad.validate().is_err());
        assert!(matches!(validate_spec("fc", 3, 1, 5), Err(Error::Config(_))));

        let p = palettize("fc", &[0.1, 0.2, 0.3], 1, 2, 1).unwrap();
        assert_eq!(p.pad, 1);
        assert_eq!(p.reconstruct().len(), 3);
    }

    #[test]
    fn size_report_examples() {
        let big = [SizeEntry { name: "all".into(), params: 4_200_000, palettizable: true }];
        let mut cfg = BTreeMap::new();
        cfg.insert("all".to_string(), Compression::Float);
        assert_eq!(size_report(&big, &cfg, 32).unwrap().total_bytes, 16_800_000);

        cfg.insert("all".to_string(), Compression::Palette { bits: 1, dim: 1 });
        let r = size_report(&big, &cfg, 32).unwrap();
        assert_eq!(r.index_bytes, 525_000);
        assert_eq!(r.codebook_bytes, 8);

        cfg.insert("all".to_string(), Compression::Palette { bits: 2, dim: 2 });
        assert_eq!(size_report(&big, &cfg, 32).unwrap().index_bytes, 525_000);

        assert!(matches!(size_report(&big, &BTreeMap::new(), 32), Err(Error::Config(_))));

        let bias = [SizeEntry { name: "fc.bias".into(), params: 10, palettizable: false }];
        assert_eq!(size_report(&bias, &BTreeMap::new(), 32).unwrap().total_bytes, 40);
    }

    proptest! {
        #[test]
        fn pack_round_trip(bits in 1u32..=8, raw in prop::collection::vec(any::<usize>(), 0..100)) {
            let idx: Vec<usize> = raw.iter().map(|v| v % (1 << bits)).collect();
            let packed = pack_indices(&idx, bits);
            prop_assert_eq!(packed.len(), (idx.len() * bits as usize).div_ceil(8));
            prop_assert_eq!(unpack_indices(&packed, bits, idx.len()).unwrap(), idx);
        }

        #[test]
        fn size_totals_sum_and_grow_with_bits(
            params in prop::collection::vec(16usize..5000, 1..5),
            dim in 1usize..4,
        ) {
            let entries: Vec<SizeEntry> = params
                .iter()
                .enumerate()
                .map(|(i, &p)| SizeEntry { name: format!("l{i}"), params: p, palettizable: true })
                .collect();
            let mut prev = 0u64;
            for bits in 1..=4 {
                let cfg = entries
                    .iter()
                    .map(|e| (e.name.clone(), Compression::Palette { bits, dim }))
                    .collect();
                let r = size_report(&entries, &cfg, 32).unwrap();
                prop_assert_eq!(r.total_bytes, r.layers.iter().map(|l| l.total_bytes).sum::<u64>());
                prop_assert_eq!(r.total_bytes, r.codebook_bytes + r.index_bytes + r.float_bytes);
                prop_assert!(r.total_bytes >= prev);
                prev = r.total_bytes;
            }
        }
    }
}
