use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `N×C×H×W` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[C, H, W]` of one image.
    pub image_shape: [usize; 3],
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        image_shape: [usize; 3],
        pixels: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        split: &str,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyData(format!("{split} split has no samples")));
        }
        let per = image_shape.iter().product::<usize>();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Consistency(format!(
                "{split}: {} pixel values for {} images of shape {image_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!("{split}: label {bad} ≥ {num_classes} classes")));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("{split}: pixel {p} outside [0, 1]")));
        }
        Ok(Dataset { image_shape, pixels, labels, num_classes, split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::EmptyData(format!("{}: limit of 0 samples", self.split)));
        }
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.pixels.truncate(n * self.image_len());
        Ok(())
    }

    /// Gathers the samples at `idx` into an `[n, C, H, W]` batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape;
        Ok((Tensor::new(vec![idx.len(), c, h, w], data)?, labels))
    }

    /// Sample order for one epoch; a pure function of `(seed, epoch)`.
    pub fn shuffled_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset::new([1, 1, 2], vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5], vec![0, 1, 0], 2, "t").unwrap()
    }

    #[test]
    fn validates_inputs() {
        assert!(matches!(
            Dataset::new([1, 1, 1], vec![], vec![], 2, "t"),
            Err(Error::EmptyData(_))
        ));
        assert!(Dataset::new([1, 1, 2], vec![0.0; 3], vec![0, 1], 2, "t").is_err());
        assert!(Dataset::new([1, 1, 1], vec![0.0], vec![2], 2, "t").is_err());
        assert!(Dataset::new([1, 1, 1], vec![1.5], vec![0], 2, "t").is_err());
    }

    #[test]
    fn batch_gathers_rows() {
        let (x, y) = tiny().batch(&[2, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(x.data(), &[0.4, 0.5, 0.0, 0.1]);
        assert_eq!(y, vec![0, 0]);
        assert!(tiny().batch(&[3]).is_err());
    }

    #[test]
    fn shuffle_is_reproducible_permutation() {
        let d = Dataset::new([1, 1, 1], vec![0.5; 50], vec![0; 50], 2, "t").unwrap();
        let a = d.shuffled_order(9, 3);
        assert_eq!(a, d.shuffled_order(9, 3));
        assert_ne!(a, d.shuffled_order(9, 4));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
