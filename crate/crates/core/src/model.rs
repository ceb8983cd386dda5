//! Desk-scale model zoo: an MLP and a two-convolution CNN, both built from
//! the tape's primitive ops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::palettizers::SizeEntry;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Cnn,
}

/// Enough to rebuild a model's layer layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchKind,
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    /// Hidden widths (MLP) or conv channel counts (CNN).
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn mlp(input: [usize; 3], hidden: Vec<usize>, classes: usize) -> Self {
        Architecture { kind: ArchKind::Mlp, input, classes, hidden }
    }

    pub fn cnn(input: [usize; 3], channels: Vec<usize>, classes: usize) -> Self {
        Architecture { kind: ArchKind::Cnn, input, classes, hidden: channels }
    }

    /// Human-readable name recorded in reports, e.g. `mlp-784-128-64-10`.
    pub fn name(&self) -> String {
        let widths: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        match self.kind {
            ArchKind::Mlp => format!(
                "mlp-{}-{}-{}",
                self.input.iter().product::<usize>(),
                widths.join("-"),
                self.classes
            ),
            ArchKind::Cnn => format!("cnn-c{}-fc{}", widths.join("-c"), self.classes),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be ≥ 1".into()));
        }
        if self.kind == ArchKind::Cnn && self.hidden.is_empty() {
            return Err(Error::Config("a CNN needs at least one conv layer".into()));
        }
        Ok(())
    }
}

pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 2;
pub const CONV_PAD: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight` is `[in × out]`.
    Linear { name: String, weight: Tensor, bias: Tensor },
    /// `weight` is `[F × C × k × k]`.
    Conv2d { name: String, weight: Tensor, bias: Tensor, stride: usize, pad: usize },
    Relu,
    Flatten,
}

impl Layer {
    pub fn weight_name(&self) -> Option<&str> {
        match self {
            Layer::Linear { name, .. } | Layer::Conv2d { name, .. } => Some(name),
            _ => None,
        }
    }
}

/// Per-layer transforms applied during a forward pass.
pub trait ForwardHooks {
    /// Replaces a layer's weight before use (fake quantization, palettization).
    fn weight(&mut self, _tape: &mut Tape, _layer: &str, w: Var) -> Result<Var> {
        Ok(w)
    }

    /// Transforms the activation after the ReLU that follows `layer`.
    fn activation(&mut self, _tape: &mut Tape, _layer: &str, x: Var) -> Result<Var> {
        Ok(x)
    }
}

pub struct NoHooks;

impl ForwardHooks for NoHooks {}

/// Tape handles of a model's weights and biases, in layer order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches")
}

impl Model {
    /// Kaiming-normal weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        match arch.kind {
            ArchKind::Mlp => {
                layers.push(Layer::Flatten);
                let mut widths = vec![arch.input.iter().product()];
                widths.extend(&arch.hidden);
                widths.push(arch.classes);
                let last = widths.len() - 2;
                for (i, pair) in widths.windows(2).enumerate() {
                    layers.push(Layer::Linear {
                        name: format!("fc{}", i + 1),
                        weight: kaiming(&mut rng, &[pair[0], pair[1]], pair[0]),
                        bias: Tensor::zeros(&[pair[1]]),
                    });
                    if i < last {
                        layers.push(Layer::Relu);
                    }
                }
            }
            ArchKind::Cnn => {
                let [mut c, mut h, mut w] = arch.input;
                for (i, &f) in arch.hidden.iter().enumerate() {
                    let fan_in = c * CONV_KERNEL * CONV_KERNEL;
                    layers.push(Layer::Conv2d {
                        name: format!("conv{}", i + 1),
                        weight: kaiming(&mut rng, &[f, c, CONV_KERNEL, CONV_KERNEL], fan_in),
                        bias: Tensor::zeros(&[f]),
                        stride: CONV_STRIDE,
                        pad: CONV_PAD,
                    });
                    layers.push(Layer::Relu);
                    c = f;
                    h = (h + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
                    w = (w + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1;
                }
                layers.push(Layer::Flatten);
                let fan_in = c * h * w;
                layers.push(Layer::Linear {
                    name: "fc".into(),
                    weight: kaiming(&mut rng, &[fan_in, arch.classes], fan_in),
                    bias: Tensor::zeros(&[arch.classes]),
                });
            }
        }
        Ok(Model { arch, layers })
    }

    /// Conv and linear weights, the regularized and compressed set.
    pub fn weights(&self) -> Vec<(&str, &Tensor)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear { name, weight, .. } | Layer::Conv2d { name, weight, .. } => {
                    Some((name.as_str(), weight))
                }
                _ => None,
            })
            .collect()
    }

    pub fn weights_mut(&mut self) -> Vec<(&str, &mut Tensor)> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Linear { name, weight, .. } | Layer::Conv2d { name, weight, .. } => {
                    Some((name.as_str(), weight))
                }
                _ => None,
            })
            .collect()
    }

    pub fn biases_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Linear { bias, .. } | Layer::Conv2d { bias, .. } => Some(bias),
                _ => None,
            })
            .collect()
    }

    pub fn weight_names(&self) -> Vec<String> {
        self.weights().into_iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Every stored tensor as `(layer.weight | layer.bias, tensor)`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Linear { name, weight, bias } | Layer::Conv2d { name, weight, bias, .. } = l
            {
                out.push((format!("{name}.weight"), weight));
                out.push((format!("{name}.bias"), bias));
            }
        }
        out
    }

    /// Replaces the tensor called `name` (as in [`Model::named_tensors`]).
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        for l in &mut self.layers {
            if let Layer::Linear { name: n, weight, bias } | Layer::Conv2d { name: n, weight, bias, .. } = l
            {
                let slot = if name == format!("{n}.weight") {
                    weight
                } else if name == format!("{n}.bias") {
                    bias
                } else {
                    continue;
                };
                if slot.shape() != value.shape() {
                    return Err(Error::Shape(format!(
                        "{name}: stored shape {:?}, new shape {:?}",
                        slot.shape(),
                        value.shape()
                    )));
                }
                *slot = value;
                return Ok(());
            }
        }
        Err(Error::Config(format!("model has no tensor named {name}")))
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn size_entries(&self) -> Vec<SizeEntry> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Linear { name, weight, bias } | Layer::Conv2d { name, weight, bias, .. } = l
            {
                out.push(SizeEntry { name: name.clone(), params: weight.numel(), palettizable: true });
                out.push(SizeEntry {
                    name: format!("{name}.bias"),
                    params: bias.numel(),
                    palettizable: false,
                });
            }
        }
        out
    }

    /// Puts weights and biases on the tape as parameters (or constants).
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in &self.layers {
            if let Layer::Linear { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } = l {
                if trainable {
                    weights.push(tape.param(weight.clone())?);
                    biases.push(tape.param(bias.clone())?);
                } else {
                    weights.push(tape.constant(weight.clone())?);
                    biases.push(tape.constant(bias.clone())?);
                }
            }
        }
        Ok(ParamVars { weights, biases })
    }

    /// Logits for a batch `x[N×C×H×W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        hooks: &mut dyn ForwardHooks,
    ) -> Result<Var> {
        let mut h = x;
        let mut idx = 0;
        let mut last_weight = "";
        for l in &self.layers {
            h = match l {
                Layer::Flatten => tape.flatten(h)?,
                Layer::Relu => {
                    let r = tape.relu(h)?;
                    hooks.activation(tape, last_weight, r)?
                }
                Layer::Linear { name, .. } => {
                    let w = hooks.weight(tape, name, vars.weights[idx])?;
                    let y = tape.matmul(h, w)?;
                    let y = tape.add_row_bias(y, vars.biases[idx])?;
                    idx += 1;
                    last_weight = name;
                    y
                }
                Layer::Conv2d { name, stride, pad, .. } => {
                    let w = hooks.weight(tape, name, vars.weights[idx])?;
                    let y = tape.conv2d(h, w, *stride, *pad)?;
                    let y = tape.add_channel_bias(y, vars.biases[idx])?;
                    idx += 1;
                    last_weight = name;
                    y
                }
            };
        }
        Ok(h)
    }

    /// Forward pass without gradients.
    pub fn logits(&self, x: &Tensor, hooks: &mut dyn ForwardHooks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = self.forward(&mut tape, &vars, xv, hooks)?;
        Ok(tape.value(out).clone())
    }

    /// Checks that `other` has the same layer layout and tensor shapes.
    pub fn same_layout(&self, other: &Model) -> bool {
        let a = self.named_tensors();
        let b = other.named_tensors();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Architecture {
        Architecture::mlp([1, 28, 28], vec![128, 64], 10)
    }

    #[test]
    fn mlp_layout() {
        let m = Model::new(mlp(), 0).unwrap();
        assert_eq!(m.arch.name(), "mlp-784-128-64-10");
        let shapes: Vec<Vec<usize>> = m.weights().iter().map(|(_, w)| w.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![784, 128], vec![128, 64], vec![64, 10]]);
        assert_eq!(m.weight_names(), vec!["fc1", "fc2", "fc3"]);
        assert_eq!(m.param_count(), 784 * 128 + 128 + 128 * 64 + 64 + 64 * 10 + 10);
    }

    #[test]
    fn cnn_layout_and_forward() {
        let arch = Architecture::cnn([1, 28, 28], vec![16, 32], 10);
        let m = Model::new(arch, 1).unwrap();
        assert_eq!(m.weight_names(), vec!["conv1", "conv2", "fc"]);
        assert_eq!(m.weights()[2].1.shape(), &[32 * 7 * 7, 10]);
        let x = Tensor::full(&[2, 1, 28, 28], 0.5);
        let logits = m.logits(&x, &mut NoHooks).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
    }

    #[test]
    fn init_is_seeded_kaiming() {
        let a = Model::new(mlp(), 3).unwrap();
        let b = Model::new(mlp(), 3).unwrap();
        let c = Model::new(mlp(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = a.weights()[0].1.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 784.0).abs() < 0.05 * 2.0 / 784.0);
    }

    #[test]
    fn set_tensor_checks_shape() {
        let mut m = Model::new(Architecture::mlp([1, 2, 2], vec![3], 2), 0).unwrap();
        assert!(m.set_tensor("fc1.bias", Tensor::zeros(&[3])).is_ok());
        assert!(m.set_tensor("fc1.bias", Tensor::zeros(&[4])).is_err());
        assert!(m.set_tensor("nope.weight", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn invalid_architectures() {
        assert!(Model::new(Architecture::mlp([1, 2, 2], vec![3], 1), 0).is_err());
        assert!(Model::new(Architecture::cnn([1, 8, 8], vec![], 3), 0).is_err());
    }
}
