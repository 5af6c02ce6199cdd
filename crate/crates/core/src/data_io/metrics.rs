use crate::error::{Result, StsError};
use crate::tensor::Tensor;

/// Error summary over all samples and over nonzero-truth samples.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub mae_star: Option<f64>,
    pub rmse_star: Option<f64>,
    pub n_samples: usize,
    pub n_nonzero: usize,
    pub zero_ratio: f64,
}

pub const METRICS_CSV_HEADER: &str = "mae,rmse,mae_star,rmse_star,zero_ratio,n_samples,n_nonzero";

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    /// One `name=value` line per metric, four decimals.
    pub fn to_text(&self) -> String {
        format!(
            "mae={}\nrmse={}\nmae_star={}\nrmse_star={}\nzero_ratio={}\nn_samples={}\nn_nonzero={}\n",
            fmt4(Some(self.mae)),
            fmt4(Some(self.rmse)),
            fmt4(self.mae_star),
            fmt4(self.rmse_star),
            fmt4(Some(self.zero_ratio)),
            self.n_samples,
            self.n_nonzero
        )
    }

    /// Values matching [`METRICS_CSV_HEADER`].
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            fmt4(Some(self.mae)),
            fmt4(Some(self.rmse)),
            fmt4(self.mae_star),
            fmt4(self.rmse_star),
            fmt4(Some(self.zero_ratio)),
            self.n_samples,
            self.n_nonzero
        )
    }
}

/// Streaming accumulator, summed in insertion order.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    abs: f64,
    sq: f64,
    abs_nz: f64,
    sq_nz: f64,
    n: usize,
    n_nz: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, truth: f64, pred: f64) {
        let e = truth - pred;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if truth != 0.0 {
            self.abs_nz += e.abs();
            self.sq_nz += e * e;
            self.n_nz += 1;
        }
    }

    pub fn add(&mut self, truth: &[f64], pred: &[f64]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(StsError::Dimension(format!(
                "{} truths but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.push(t, p);
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(StsError::Contract("no samples to score".into()));
        }
        // Rounding can leave the computed root a hair below the mean.
        let root = |sq: f64, abs: f64, n: usize| (sq / n as f64).sqrt().max(abs / n as f64);
        let (mae_star, rmse_star) = if self.n_nz > 0 {
            (
                Some(self.abs_nz / self.n_nz as f64),
                Some(root(self.sq_nz, self.abs_nz, self.n_nz)),
            )
        } else {
            (None, None)
        };
        Ok(MetricsReport {
            mae: self.abs / self.n as f64,
            rmse: root(self.sq, self.abs, self.n),
            mae_star,
            rmse_star,
            n_samples: self.n,
            n_nonzero: self.n_nz,
            zero_ratio: (self.n - self.n_nz) as f64 / self.n as f64,
        })
    }
}

/// Scores `pred` against `truth`; both on the index scale.
pub fn metrics(truth: &Tensor, pred: &Tensor) -> Result<MetricsReport> {
    if truth.shape() != pred.shape() {
        return Err(StsError::Dimension(format!(
            "truth {:?} and predictions {:?} differ",
            truth.shape(),
            pred.shape()
        )));
    }
    let mut acc = MetricsAccumulator::new();
    acc.add(truth.data(), pred.data())?;
    acc.finish()
}
