//! Weight-distribution measurements: moments, histograms, skew and paired
//! per-layer comparison tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference raw kurtosis of a uniform distribution.
pub const UNIFORM_KURTOSIS: f64 = 1.8;
pub const DEFAULT_BINS: usize = 64;

/// Mean accumulated relative to the first element, so constant inputs give
/// their value back exactly.
pub fn mean(w: &[f64]) -> f64 {
    let Some(&first) = w.first() else { return f64::NAN };
    first + w.iter().map(|v| v - first).sum::<f64>() / w.len() as f64
}

pub fn population_std(w: &[f64], mean: f64) -> f64 {
    central_moment(w, mean, 2).sqrt()
}

fn central_moment(w: &[f64], mean: f64, k: i32) -> f64 {
    w.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / w.len() as f64
}

fn min_max(w: &[f64]) -> (f64, f64) {
    w.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Two-column text: `bin_center count` per line.
    pub fn to_text(&self) -> String {
        self.centers()
            .iter()
            .zip(&self.counts)
            .map(|(c, n)| format!("{c:.9e} {n}\n"))
            .collect()
    }
}

/// Equal-width bins over `[min, max]`; the maximum lands in the last bin.
pub fn histogram(w: &[f64], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::Domain("histogram needs at least one bin".into()));
    }
    if w.is_empty() {
        return Ok(Histogram { edges: vec![0.0; n_bins + 1], counts: vec![0; n_bins] });
    }
    let (lo, hi) = min_max(w);
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins)
        .map(|i| if i == n_bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0; n_bins];
    for &v in w {
        let bin = if width > 0.0 { ((v - lo) / width).floor() as usize } else { 0 };
        counts[bin.min(n_bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer_name: String,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub range: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Raw (Pearson) kurtosis; absent when the standard deviation is 0.
    pub kurtosis: Option<f64>,
    pub histogram: Histogram,
}

pub fn layer_stats(name: &str, w: &[f64]) -> Result<LayerStats> {
    layer_stats_with_bins(name, w, DEFAULT_BINS)
}

pub fn layer_stats_with_bins(name: &str, w: &[f64], n_bins: usize) -> Result<LayerStats> {
    if w.len() < 2 {
        return Err(Error::Domain(format!("layer_stats({name}) needs at least 2 weights")));
    }
    let (min, max) = min_max(w);
    let mu = mean(w);
    let var = central_moment(w, mu, 2);
    let kurtosis = (var > 0.0).then(|| central_moment(w, mu, 4) / (var * var));
    Ok(LayerStats {
        layer_name: name.to_string(),
        count: w.len(),
        min,
        max,
        mean: mu,
        range: max - min,
        std: var.sqrt(),
        kurtosis,
        histogram: histogram(w, n_bins)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Skew {
    /// Midrange minus median.
    pub mean_offset: f64,
    /// Third standardized moment (0 for a constant tensor).
    pub asymmetry: f64,
}

pub fn skew_check(w: &[f64]) -> Result<Skew> {
    if w.len() < 2 {
        return Err(Error::Domain("skew_check needs at least 2 weights".into()));
    }
    let (lo, hi) = min_max(w);
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median =
        if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    let mu = mean(w);
    let var = central_moment(w, mu, 2);
    let asymmetry = if var > 0.0 { central_moment(w, mu, 3) / var.powf(1.5) } else { 0.0 };
    Ok(Skew { mean_offset: 0.5 * (lo + hi) - median, asymmetry })
}

/// One layer of a paired comparison between checkpoints `a` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub layer: String,
    pub range_a: f64,
    pub range_b: f64,
    pub std_a: f64,
    pub std_b: f64,
    pub range_ratio: f64,
    pub std_ratio: f64,
}

impl PairedRow {
    pub fn new(layer: &str, range_a: f64, range_b: f64, std_a: f64, std_b: f64) -> Self {
        PairedRow {
            layer: layer.to_string(),
            range_a,
            range_b,
            std_a,
            std_b,
            range_ratio: range_a / range_b,
            std_ratio: std_a / std_b,
        }
    }

    pub const CSV_HEADER: &'static str = "layer,range_a,range_b,std_a,std_b,range_ratio,std_ratio";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.layer,
            self.range_a,
            self.range_b,
            self.std_a,
            self.std_b,
            self.range_ratio,
            self.std_ratio
        )
    }
}

/// Per-layer paired {range, std} of two weight sets with matching layouts.
pub fn stats_table(a: &[(&str, &[f64])], b: &[(&str, &[f64])]) -> Result<Vec<PairedRow>> {
    if a.len() != b.len() {
        return Err(Error::Consistency(format!(
            "architecture mismatch: {} layers vs {}",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .zip(b)
        .map(|((na, wa), (nb, wb))| {
            if na != nb || wa.len() != wb.len() {
                return Err(Error::Consistency(format!(
                    "architecture mismatch: {na}[{}] vs {nb}[{}]",
                    wa.len(),
                    wb.len()
                )));
            }
            let sa = layer_stats_with_bins(na, wa, 1)?;
            let sb = layer_stats_with_bins(nb, wb, 1)?;
            Ok(PairedRow::new(na, sa.range, sb.range, sa.std, sb.std))
        })
        .collect()
}

pub fn table_to_csv(rows: &[PairedRow]) -> String {
    let mut out = String::from(PairedRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn small_stats() {
        let s = layer_stats("w", &[-1.0, 2.0]).unwrap();
        assert_eq!(s.range, 3.0);
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 1.5);
        assert_eq!(s.kurtosis, Some(1.0));
        assert!(layer_stats("w", &[1.0]).is_err());
        assert_eq!(layer_stats("c", &[0.2; 5]).unwrap().kurtosis, None);
    }

    #[test]
    fn uniform_kurtosis_near_1_8() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w: Vec<f64> = (0..1_000_000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let k = layer_stats("u", &w).unwrap().kurtosis.unwrap();
        assert!((k - UNIFORM_KURTOSIS).abs() <= 0.02, "kurtosis {k}");
    }

    #[test]
    fn normal_kurtosis_near_3() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k = layer_stats("n", &w).unwrap().kurtosis.unwrap();
        assert!((k - 3.0).abs() <= 0.05, "kurtosis {k}");
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.4; 7], 5).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 7);
        let h = histogram(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.edges, vec![0.0, 1.5, 3.0]);
        assert!(histogram(&[1.0], 0).is_err());
        assert_eq!(h.to_text(), "7.500000000e-1 2\n2.250000000e0 2\n");
    }

    #[test]
    fn skew_examples() {
        let s = skew_check(&[-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.asymmetry, 0.0);
        assert_eq!(s.mean_offset, 0.0);
        let s = skew_check(&[0.0, 0.0, 0.0, 10.0]).unwrap();
        assert!(s.asymmetry > 0.0);
        assert!(s.mean_offset > 0.0);
        assert_eq!(skew_check(&[1.0, 1.0]).unwrap().asymmetry, 0.0);
    }

    #[test]
    fn identical_tables_have_unit_ratios() {
        let w1 = [0.1, -0.4, 0.3];
        let w2 = [1.0, 2.0, -0.5, 0.25];
        let a = [("conv1", &w1[..]), ("fc", &w2[..])];
        for row in stats_table(&a, &a).unwrap() {
            assert_eq!(row.range_ratio, 1.0);
            assert_eq!(row.std_ratio, 1.0);
        }
        let b = [("conv1", &w1[..])];
        assert!(matches!(stats_table(&a, &b), Err(Error::Consistency(_))));
    }

    #[test]
    fn reference_row_formats() {
        // conv1 of a ResNet-18 pretrained with and without range regularization.
        let row = PairedRow::new("conv1", 0.63, 1.86, 0.11, 0.13);
        let csv = table_to_csv(std::slice::from_ref(&row));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(PairedRow::CSV_HEADER));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(&fields[..5], &["conv1", "0.63", "1.86", "0.11", "0.13"]);
        assert!((fields[5].parse::<f64>().unwrap() - 0.63 / 1.86).abs() < 1e-15);
        assert!(row.range_ratio < 0.34);
    }

    fn arb_weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 2..200)
    }

    proptest! {
        #[test]
        fn affine_invariance(w in arb_weights(), c in 0.1f64..5.0, neg in any::<bool>(), shift in -2.0f64..2.0) {
            let c = if neg { -c } else { c };
            let s = layer_stats("w", &w).unwrap();
            prop_assume!(s.std > 1e-3);
            let moved: Vec<f64> = w.iter().map(|v| c * v + shift).collect();
            let m = layer_stats("w", &moved).unwrap();
            prop_assert!((m.range - c.abs() * s.range).abs() <= 1e-9 * (1.0 + s.range));
            prop_assert!((m.std - c.abs() * s.std).abs() <= 1e-9 * (1.0 + s.std));
            prop_assert!((m.kurtosis.unwrap() - s.kurtosis.unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn histogram_partitions(w in arb_weights(), bins in 1usize..40) {
            let h = histogram(&w, bins).unwrap();
            prop_assert_eq!(h.total(), w.len());
        }

        #[test]
        fn kurtosis_at_least_one(w in arb_weights()) {
            if let Some(k) = layer_stats("w", &w).unwrap().kurtosis {
                prop_assert!(k >= 1.0 - 1e-12);
            }
        }

        #[test]
        fn swapped_table_transposes(a in arb_weights(), b in arb_weights()) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            let ab = stats_table(&[("l", a)], &[("l", b)]).unwrap();
            let ba = stats_table(&[("l", b)], &[("l", a)]).unwrap();
            prop_assert_eq!(ab[0].range_a, ba[0].range_b);
            prop_assert_eq!(ab[0].range_b, ba[0].range_a);
            prop_assert_eq!(ab[0].std_a, ba[0].std_b);
            prop_assert_eq!(ab[0].std_b, ba[0].std_a);
        }
    }
}
