//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in exact reverse order and accumulates adjoints into the gradient
//! slots of parameter leaves.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op implemented outside the core set.
///
/// The forward value is computed by the caller; the tape only needs the
/// vector-Jacobian product. `backward` returns one adjoint per input (same
/// length as that input), or `None` for inputs it does not differentiate.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64])
        -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    AddChannelBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Parameter leaves receive accumulated gradients.
    param: bool,
    /// Whether any parameter is reachable through this node's inputs.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable tensor. Its gradient slot is populated by `backward`.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("param")?;
        Ok(self.push(value, Op::Leaf, true, true))
    }

    /// Registers a tensor that takes no gradient (inputs, frozen values).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("constant")?;
        Ok(self.push(value, Op::Leaf, false, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a parameter leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, param: bool, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, param, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op_name(&op))?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(value, op, false, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul lhs")?;
        let (k2, n) = dims2(tb, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    /// `x[m×n] + b[n]` added to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = dims2(tx, "add_row_bias input")?;
        if tb.numel() != n {
            return Err(Error::Dimension(format!(
                "bias of {} elements for rows of {n}",
                tb.numel()
            )));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n).take(m) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push_op(value, Op::AddRowBias(x, b), &[x, b])
    }

    /// Zero-padded cross-correlation of `x[N×C×H×W]` with `w[F×C×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geo = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, pad)?;
        let out = geo.forward(self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![geo.n, geo.f, geo.oh, geo.ow], out)?;
        self.push_op(value, Op::Conv2d { x, w, stride, pad }, &[x, w])
    }

    /// `x[N×F×H×W] + b[F]` per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape().len() != 4 || tx.shape()[1] != tb.numel() {
            return Err(Error::Dimension(format!(
                "channel bias of {} elements for input {:?}",
                tb.numel(),
                tx.shape()
            )));
        }
        let plane = tx.shape()[2] * tx.shape()[3];
        let f = tb.numel();
        let mut out = tx.data().to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = tb.data()[i % f];
            chunk.iter_mut().for_each(|o| *o += bias);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        self.push_op(value, Op::AddChannelBias(x, b), &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push_op(value, Op::Relu(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_op(value, Op::Reshape(x), &[x])
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        let lead = *shape.first().ok_or_else(|| Error::Shape("flatten of a scalar".into()))?;
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![lead, rest])
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = dims2(t, "softmax_ce logits")?;
        if labels.len() != b {
            return Err(Error::Dimension(format!("{} labels for a batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} outside [0, {c})")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, row) in t.data().chunks(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * c + j] = e;
                z += e;
            }
            probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
            loss += z.ln() + max - row[labels[i]];
        }
        let value = Tensor::scalar(loss / b as f64);
        self.push_op(
            value,
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = zip_with(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = zip_with(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * c);
        self.push_op(value, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    /// Appends an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        output.check_finite(op.name())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, false, needs_grad))
    }

    /// Propagates adjoints from a scalar `loss` back to every reachable
    /// parameter. Gradients accumulate across calls until `zero_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if node.param {
                adj[idx] = Some(g);
                continue;
            }
            for (input, contrib) in self.node_backward(idx, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        for (idx, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[idx].param {
                    self.nodes[idx].value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &tb.data()[p * n..(p + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        da[i * k + p] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                    }
                }
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ta.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        db[p * n..(p + 1) * n]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, gv)| *d += av * gv);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::AddRowBias(x, b) => {
                let n = self.value(*b).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let geo = ConvGeometry::new(tx.shape(), tw.shape(), *stride, *pad)
                    .expect("geometry validated in forward");
                let (dx, dw) = geo.backward(tx.data(), tw.data(), g);
                vec![(*x, dx), (*w, dw)]
            }
            Op::AddChannelBias(x, b) => {
                let shape = self.value(*x).shape();
                let plane = shape[2] * shape[3];
                let f = self.value(*b).numel();
                let mut db = vec![0.0; f];
                for (i, chunk) in g.chunks(plane).enumerate() {
                    db[i % f] += chunk.iter().sum::<f64>();
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Relu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::SoftmaxCe { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(*logits, d)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let da = self.value(*b).data().iter().zip(g).map(|(y, gv)| y * gv).collect();
                let db = self.value(*a).data().iter().zip(g).map(|(x, gv)| x * gv).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, &node.value, g);
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(v, dg)| dg.map(|dg| (*v, dg)))
                    .collect()
            }
        }
    }
}

fn op_name(op: &Op) -> &str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::AddRowBias(..) => "add_row_bias",
        Op::Conv2d { .. } => "conv2d",
        Op::AddChannelBias(..) => "add_channel_bias",
        Op::Relu(_) => "relu",
        Op::Reshape(_) => "reshape",
        Op::SoftmaxCe { .. } => "softmax_ce",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::Custom { op, .. } => op.name(),
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Dimension(format!("{what} must be 2-d, got {other:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            orow.iter_mut()
                .zip(&b[p * n..(p + 1) * n])
                .for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let &[n, c, h, wd] = x else {
            return Err(Error::Dimension(format!("conv2d input must be N×C×H×W, got {x:?}")));
        };
        let &[f, c2, kh, kw] = w else {
            return Err(Error::Dimension(format!("conv2d kernel must be F×C×kh×kw, got {w:?}")));
        };
        if c != c2 {
            return Err(Error::Dimension(format!("conv2d channels differ: input {c}, kernel {c2}")));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be ≥ 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::Dimension(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        Ok(ConvGeometry { n, c, h, w: wd, f, kh, kw, oh, ow, stride, pad })
    }

    /// Input coordinate for an output position and kernel offset, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.f * self.oh * self.ow];
        for ni in 0..self.n {
            for fi in 0..self.f {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let mut acc = 0.0;
                        for ci in 0..self.c {
                            for ky in 0..self.kh {
                                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.src(ox, kx, self.w) else { continue };
                                    acc += x[((ni * self.c + ci) * self.h + iy) * self.w + ix]
                                        * w[((fi * self.c + ci) * self.kh + ky) * self.kw + kx];
                                }
                            }
                        }
                        out[((ni * self.f + fi) * self.oh + oy) * self.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], w: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        for ni in 0..self.n {
            for fi in 0..self.f {
                for oy in 0..self.oh {
                    for ox in 0..self.ow {
                        let go = g[((ni * self.f + fi) * self.oh + oy) * self.ow + ox];
                        if go == 0.0 {
                            continue;
                        }
                        for ci in 0..self.c {
                            for ky in 0..self.kh {
                                let Some(iy) = self.src(oy, ky, self.h) else { continue };
                                for kx in 0..self.kw {
                                    let Some(ix) = self.src(ox, kx, self.w) else { continue };
                                    let xi = ((ni * self.c + ci) * self.h + iy) * self.w + ix;
                                    let wi = ((fi * self.c + ci) * self.kh + ky) * self.kw + kx;
                                    dx[xi] += go * w[wi];
                                    dw[wi] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (dx, dw)
    }
}
