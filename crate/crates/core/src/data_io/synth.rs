//! Class-conditional Gaussian images: a stand-in when no IDX files are at
//! hand.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    /// Pixels per image; perfect squares become `1×√dim×√dim` images.
    pub dim: usize,
    /// Gaussian clusters per class.
    pub modes: usize,
    /// Distance between any two cluster means, in units of `noise`.
    pub separation: f64,
    /// Per-pixel noise standard deviation.
    pub noise: f64,
    /// Pixel value all cluster means are spread around.
    pub center: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 6000,
            n_test: 2000,
            classes: 10,
            dim: 784,
            modes: 1,
            separation: 8.0,
            noise: 0.2,
            center: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synth needs ≥ 2 classes, got {}", self.classes)));
        }
        if self.modes == 0 {
            return Err(Error::Config("synth needs ≥ 1 mode per class".into()));
        }
        if self.classes * self.modes > self.dim {
            return Err(Error::Config(format!(
                "synth: {} cluster means need dim ≥ {}, got {}",
                self.classes * self.modes,
                self.classes * self.modes,
                self.dim
            )));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config(format!("synth separation must be > 0, got {}", self.separation)));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("synth noise must be > 0, got {}", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.center) {
            return Err(Error::Config(format!("synth center must be in [0, 1], got {}", self.center)));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let side = (self.dim as f64).sqrt().round() as usize;
        if side * side == self.dim {
            [1, side, side]
        } else {
            [1, 1, self.dim]
        }
    }
}

/// Cluster means `center + (sep·σ/√2)·e_j` over orthonormal directions `e_j`,
/// so every pair of means sits `sep·σ` apart.
fn cluster_means(spec: &SynthSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < spec.classes * spec.modes {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let radius = spec.separation * spec.noise / std::f64::consts::SQRT_2;
    basis.into_iter().map(|e| e.into_iter().map(|x| spec.center + radius * x).collect()).collect()
}

fn sample(spec: &SynthSpec, means: &[Vec<f64>], n: usize, seed: u64, stream: u64, split: &str) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyData(format!("synth {split} split of 0 samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut pixels = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let mode = (i / spec.classes) % spec.modes;
        let mean = &means[class * spec.modes + mode];
        for &m in mean {
            let z: f64 = StandardNormal.sample(&mut rng);
            pixels.push((m + spec.noise * z).clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    Dataset::new(spec.image_shape(), pixels, labels, spec.classes, split)
}

/// Train and test splits drawn around the same means with independent noise.
pub fn synth_split(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let means = cluster_means(spec, seed);
    Ok((
        sample(spec, &means, spec.n_train, seed, 1, "train")?,
        sample(spec, &means, spec.n_test, seed, 2, "test")?,
    ))
}

/// `n` training samples with default separation and noise.
pub fn synth_gaussian(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    let spec = SynthSpec { n_train: n, n_test: 1, classes, dim, ..SynthSpec::default() };
    spec.validate()?;
    sample(&spec, &cluster_means(&spec, seed), n, seed, 1, "train")
}
