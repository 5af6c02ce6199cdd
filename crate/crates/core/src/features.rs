//! Anomaly-index tensors, normalization, category-aware embedding and
//! sinusoidal positional encoding.

use chrono::{DateTime, Utc};
use rand::Rng;

use crate::error::{Result, StsError};
use crate::tensor::{Tape, Tensor, Var};

/// Anomaly indices `X[r, t, c]` with their time axis metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyTensor {
    values: Tensor,
    /// Seconds per slot.
    pub slot_duration: i64,
    pub category_names: Vec<String>,
    pub t0: DateTime<Utc>,
}

impl AnomalyTensor {
    /// `values` must be rank 3 (regions × slots × categories) and
    /// non-negative.
    pub fn new(
        values: Tensor,
        slot_duration: i64,
        category_names: Vec<String>,
        t0: DateTime<Utc>,
    ) -> Result<Self> {
        if values.rank() != 3 {
            return Err(StsError::Dimension(format!(
                "anomaly tensor must be N×T×C, got shape {:?}",
                values.shape()
            )));
        }
        if category_names.len() != values.shape()[2] {
            return Err(StsError::Dimension(format!(
                "{} category names for {} categories",
                category_names.len(),
                values.shape()[2]
            )));
        }
        if slot_duration <= 0 {
            return Err(StsError::Argument("slot duration must be positive".into()));
        }
        if let Some(v) = values.data().iter().find(|&&v| v < 0.0) {
            return Err(StsError::Data(format!("negative anomaly index {v}")));
        }
        Ok(AnomalyTensor {
            values,
            slot_duration,
            category_names,
            t0,
        })
    }

    /// Unit-slot tensor with default metadata, mostly for tests.
    pub fn from_values(values: Tensor) -> Result<Self> {
        let c = values.shape().get(2).copied().unwrap_or(0);
        let names = (0..c).map(|i| format!("c{i}")).collect();
        Self::new(values, 86_400, names, DateTime::<Utc>::UNIX_EPOCH)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn n_regions(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_slots(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_categories(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn get(&self, r: usize, t: usize, c: usize) -> f64 {
        self.values.get(&[r, t, c])
    }

    /// Fraction of cells that are exactly zero.
    pub fn zero_ratio(&self) -> f64 {
        let zeros = self.values.data().iter().filter(|&&v| v == 0.0).count();
        zeros as f64 / self.values.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    ZScore,
    MinMax,
}

impl std::str::FromStr for NormKind {
    type Err = StsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(NormKind::ZScore),
            "minmax" => Ok(NormKind::MinMax),
            other => Err(StsError::Config(format!(
                "unknown normalization '{other}' (expected zscore or minmax)"
            ))),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::ZScore => "zscore",
            NormKind::MinMax => "minmax",
        })
    }
}

/// Per-category normalization statistics.
///
/// `sigma` holds the population standard deviation; a degenerate category
/// (σ = 0, or max = min) is stored with a denominator of 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub kind: NormKind,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Normalized values tagged with the transform that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub values: Tensor,
    pub kind: NormKind,
}

impl NormStats {
    /// Fits statistics over every region and the slots `slots` of an N×T×C
    /// tensor.
    pub fn fit(values: &Tensor, kind: NormKind, slots: std::ops::Range<usize>) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 || slots.is_empty() || slots.end > shape[1] {
            return Err(StsError::Argument(format!(
                "cannot fit normalization on slots {slots:?} of shape {shape:?}"
            )));
        }
        let (n, t, c) = (shape[0], shape[1], shape[2]);
        let count = (n * slots.len()) as f64;
        let mut mu = vec![0.0; c];
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for r in 0..n {
            for s in slots.clone() {
                for k in 0..c {
                    let v = values.data()[(r * t + s) * c + k];
                    mu[k] += v;
                    min[k] = min[k].min(v);
                    max[k] = max[k].max(v);
                }
            }
        }
        mu.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for s in slots.clone() {
                for k in 0..c {
                    let d = values.data()[(r * t + s) * c + k] - mu[k];
                    var[k] += d * d;
                }
            }
        }
        let sigma = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(NormStats {
            kind,
            mu,
            sigma,
            min,
            max,
        })
    }

    pub fn n_categories(&self) -> usize {
        self.mu.len()
    }

    fn offset_and_scale(&self, c: usize) -> (f64, f64) {
        match self.kind {
            NormKind::ZScore => (self.mu[c], self.sigma[c]),
            NormKind::MinMax => {
                let range = self.max[c] - self.min[c];
                (self.min[c], if range > 0.0 { range } else { 1.0 })
            }
        }
    }

    /// Divisor used for prediction targets. Targets are scaled but not
    /// shifted, so a prediction of exactly zero means a zero index.
    pub fn target_scale(&self, c: usize) -> f64 {
        self.offset_and_scale(c).1
    }

    fn check_width(&self, t: &Tensor) -> Result<()> {
        if t.shape().last() != Some(&self.n_categories()) {
            return Err(StsError::Contract(format!(
                "tensor of shape {:?} does not end in {} categories",
                t.shape(),
                self.n_categories()
            )));
        }
        Ok(())
    }

    /// Applies the fitted transform to any tensor whose last axis is the
    /// category axis. Never refits.
    pub fn apply(&self, x: &Tensor) -> Result<Normalized> {
        self.check_width(x)?;
        let c = self.n_categories();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let (off, sc) = self.offset_and_scale(i % c);
            *v = (*v - off) / sc;
        }
        Ok(Normalized {
            values: Tensor::new(x.shape().to_vec(), data)?,
            kind: self.kind,
        })
    }

    /// Exact inverse of [`NormStats::apply`].
    pub fn denormalize(&self, x: &Normalized) -> Result<Tensor> {
        if x.kind != self.kind {
            return Err(StsError::Contract(format!(
                "values normalized with {} cannot be inverted with {} statistics",
                x.kind, self.kind
            )));
        }
        self.check_width(&x.values)?;
        let c = self.n_categories();
        let mut data = x.values.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            let (off, sc) = self.offset_and_scale(i % c);
            *v = *v * sc + off;
        }
        Tensor::new(x.values.shape().to_vec(), data)
    }

    /// Maps scaled predictions back to index units, clamped at zero.
    pub fn unscale_prediction(&self, pred: &Tensor) -> Result<Tensor> {
        self.check_width(pred)?;
        let c = self.n_categories();
        let mut data = pred.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = (*v * self.target_scale(i % c)).max(0.0);
        }
        Tensor::new(pred.shape().to_vec(), data)
    }
}

/// Fits on all slots and normalizes in one go.
pub fn normalize(x: &AnomalyTensor, kind: NormKind) -> Result<(Normalized, NormStats)> {
    let stats = NormStats::fit(x.values(), kind, 0..x.n_slots())?;
    Ok((stats.apply(x.values())?, stats))
}

pub fn denormalize(x: &Normalized, stats: &NormStats) -> Result<Tensor> {
    stats.denormalize(x)
}

/// Clamp applied to index-scale predictions before they are scored.
pub fn clamp_prediction(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Learnable per-category vectors `e_c`, one row per category.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryEmbeddingTable {
    pub vectors: Tensor,
}

impl CategoryEmbeddingTable {
    /// Uniform in ±1/√d.
    pub fn init(n_categories: usize, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let data = (0..n_categories * d)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        CategoryEmbeddingTable {
            vectors: Tensor::from_parts(vec![n_categories, d], data),
        }
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// `E[..., c, :] = x̄[..., c] · e_c` for normalized values `xbar` whose last
/// axis is the category axis and a `table` var of shape C×d.
pub fn category_embed(tape: &mut Tape, xbar: &Tensor, table: Var) -> Result<Var> {
    let ts = tape.shape(table).to_vec();
    if ts.len() != 2 || xbar.shape().last() != Some(&ts[0]) {
        return Err(StsError::Dimension(format!(
            "embedding table {ts:?} does not match input {:?}",
            xbar.shape()
        )));
    }
    let expanded = tape.constant(xbar.expand_last(ts[1]));
    tape.mul(expanded, table)
}

/// Transformer sinusoidal encoding, `t_len × d`:
/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(…)`.
pub fn positional_encode(t_len: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(StsError::Argument(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    if t_len == 0 {
        return Err(StsError::Argument("positional encoding needs t_len ≥ 1".into()));
    }
    let mut data = vec![0.0; t_len * d];
    for pos in 0..t_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![t_len, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(vals: &[f64]) -> Tensor {
        Tensor::new(vec![vals.len(), 1, 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn zscore_closed_form() {
        let x = AnomalyTensor::from_values(column(&[1.0, 2.0, 3.0])).unwrap();
        let (xn, stats) = normalize(&x, NormKind::ZScore).unwrap();
        assert_eq!(stats.mu, vec![2.0]);
        assert!((stats.sigma[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let v = xn.values.data();
        assert!((v[0] + 1.224_744_871).abs() < 1e-9);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 1.224_744_871).abs() < 1e-9);
    }

    #[test]
    fn degenerate_category_maps_to_zero() {
        let x = AnomalyTensor::from_values(column(&[4.0, 4.0, 4.0])).unwrap();
        let (xn, stats) = normalize(&x, NormKind::ZScore).unwrap();
        assert_eq!(stats.sigma, vec![1.0]);
        assert!(xn.values.data().iter().all(|&v| v == 0.0));
        let (xm, _) = normalize(&x, NormKind::MinMax).unwrap();
        assert!(xm.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn minmax_linear_map() {
        let vals: Vec<f64> = (0..6).map(f64::from).collect();
        let x = AnomalyTensor::from_values(column(&vals)).unwrap();
        let (xn, _) = normalize(&x, NormKind::MinMax).unwrap();
        let v = xn.values.data();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[5], 1.0);
        assert!((v[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn denormalize_examples() {
        let x = AnomalyTensor::from_values(column(&[1.0, 5.0, 0.0])).unwrap();
        let (_, stats) = normalize(&x, NormKind::ZScore).unwrap();
        let zero = Normalized {
            values: Tensor::zeros(&[1, 1]),
            kind: NormKind::ZScore,
        };
        assert_eq!(denormalize(&zero, &stats).unwrap().data(), &[2.0]);
        let wrong = Normalized {
            values: Tensor::zeros(&[1, 1]),
            kind: NormKind::MinMax,
        };
        assert!(matches!(denormalize(&wrong, &stats), Err(StsError::Contract(_))));
        let pred = Tensor::new(vec![1, 1], vec![-0.1]).unwrap();
        assert_eq!(clamp_prediction(&pred).data(), &[0.0]);
    }

    #[test]
    fn category_embed_examples() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let xbar = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let e = category_embed(&mut tape, &xbar, table).unwrap();
        assert_eq!(tape.shape(e), &[3, 1, 2]);
        assert_eq!(tape.value(e).data(), &[0.0, 0.0, 0.5, -1.0, 1.0, -2.0]);
    }

    #[test]
    fn positional_encoding_examples() {
        let pe = positional_encode(3, 6).unwrap();
        assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(&[1, 0]) - 0.8415).abs() < 1e-4);
        assert!(positional_encode(4, 5).is_err());
        let big = positional_encode(200, 16).unwrap();
        assert!(big.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_rows_are_distinct() {
        let pe = positional_encode(10_000, 4).unwrap();
        let mut rows: Vec<Vec<u64>> = pe
            .data()
            .chunks(4)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 10_000);
    }

    #[test]
    fn stats_fit_on_training_slots_only() {
        // N=1, T=4, C=1: only the first two slots feed the statistics.
        let x = Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 100.0, 200.0]).unwrap();
        let stats = NormStats::fit(&x, NormKind::ZScore, 0..2).unwrap();
        assert_eq!(stats.mu, vec![2.0]);
        let before = stats.clone();
        let _ = stats.apply(&x).unwrap();
        assert_eq!(stats, before);
    }

    proptest! {
        #[test]
        fn zscore_has_zero_mean_unit_variance(vals in prop::collection::vec(0.0f64..50.0, 12)) {
            let t = Tensor::new(vec![3, 2, 2], vals).unwrap();
            let x = AnomalyTensor::from_values(t).unwrap();
            let (xn, stats) = normalize(&x, NormKind::ZScore).unwrap();
            for c in 0..2 {
                let col: Vec<f64> = xn.values.data().iter().skip(c).step_by(2).copied().collect();
                let raw: Vec<f64> = x.values().data().iter().skip(c).step_by(2).copied().collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                prop_assert!(mean.abs() < 1e-10);
                let degenerate = raw.iter().all(|&v| v == raw[0]);
                if !degenerate {
                    let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
                    prop_assert!((var - 1.0).abs() < 1e-8);
                }
            }
            let back = denormalize(&xn, &stats).unwrap();
            prop_assert!(back.max_abs_diff(x.values()) < 1e-10);
        }

        #[test]
        fn embedding_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0,
                               xs in prop::collection::vec(-2.0f64..2.0, 6),
                               ys in prop::collection::vec(-2.0f64..2.0, 6)) {
            let table = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let embed = |v: &[f64]| {
                let mut tape = Tape::new();
                let tv = tape.constant(table.clone());
                let e = category_embed(&mut tape, &Tensor::new(vec![2, 3], v.to_vec()).unwrap(), tv).unwrap();
                tape.value(e).clone()
            };
            let combo: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let lhs = embed(&combo);
            let (ex, ey) = (embed(&xs), embed(&ys));
            for i in 0..lhs.len() {
                prop_assert!((lhs.data()[i] - (a * ex.data()[i] + b * ey.data()[i])).abs() < 1e-12);
            }
        }
    }
}
