//! Synthetic data, event-log ingestion and evaluation metrics.

mod events;
mod metrics;
mod synth;

use chrono::{DateTime, Utc};

pub use events::{export_events, format_timestamp, ingest, parse_timestamp, EventRecord, IngestReport, EVENTS_HEADER};
pub use metrics::{metrics, MetricsAccumulator, MetricsReport, METRICS_CSV_HEADER};
pub use synth::{generate, SynthConfig, SynthReport};

use crate::error::{Result, StsError};
use crate::features::AnomalyTensor;
use crate::tensor::Tensor;

/// Time axis and category list used to bin events.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotLayout {
    pub t0: DateTime<Utc>,
    pub slot_seconds: i64,
    pub n_slots: usize,
    pub categories: Vec<String>,
}

impl SlotLayout {
    pub fn validate(&self) -> Result<()> {
        if self.slot_seconds <= 0 {
            return Err(StsError::Config("slot duration must be positive".into()));
        }
        if self.n_slots == 0 || self.categories.is_empty() {
            return Err(StsError::Config("need at least one slot and one category".into()));
        }
        Ok(())
    }
}

/// Sums runs of `factor` consecutive slots. Returns the coarser tensor and
/// the number of trailing slots dropped.
pub fn rebin(x: &AnomalyTensor, factor: usize) -> Result<(AnomalyTensor, usize)> {
    if factor == 0 {
        return Err(StsError::Argument("rebin factor must be ≥ 1".into()));
    }
    let (n, t, c) = (x.n_regions(), x.n_slots(), x.n_categories());
    let t_new = t / factor;
    if t_new == 0 {
        return Err(StsError::Argument(format!(
            "rebin factor {factor} exceeds the {t} available slots"
        )));
    }
    let mut out = vec![0.0; n * t_new * c];
    for r in 0..n {
        for s in 0..t_new * factor {
            for k in 0..c {
                out[(r * t_new + s / factor) * c + k] += x.get(r, s, k);
            }
        }
    }
    let values = Tensor::new(vec![n, t_new, c], out)?;
    let y = AnomalyTensor::new(
        values,
        x.slot_duration * factor as i64,
        x.category_names.clone(),
        x.t0,
    )?;
    Ok((y, t - t_new * factor))
}
