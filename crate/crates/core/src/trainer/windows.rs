use crate::error::{Result, StsError};
use crate::features::{AnomalyTensor, NormStats};
use crate::model::Batch;
use crate::tensor::Tensor;

use super::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Sliding windows `(X[t−T..t], X[t])` over one anomaly tensor, split
/// chronologically into train, validation and test.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    raw: Tensor,
    normalized: Tensor,
    stats: NormStats,
    t_window: usize,
    targets: Vec<usize>,
    splits: Vec<Split>,
}

/// Builds windows for every target slot `t ∈ [T, T_total)`.
///
/// The first `⌈n·a/(a+b)⌉` windows (ratio `a:b`) are train/validation, of
/// which the last `val_slots` (keeping at least one for training) are
/// validation; the rest are test. Normalization is fitted on the slots seen
/// by training windows only.
pub fn make_windows(x: &AnomalyTensor, cfg: &TrainConfig) -> Result<WindowedDataset> {
    build(x, cfg, None)
}

/// As [`make_windows`] but with normalization statistics fixed in advance,
/// e.g. those stored with a checkpoint.
pub fn make_windows_with_stats(x: &AnomalyTensor, cfg: &TrainConfig, stats: &NormStats) -> Result<WindowedDataset> {
    if stats.n_categories() != x.n_categories() {
        return Err(StsError::Config(format!(
            "n_categories mismatch: statistics cover {}, data has {}",
            stats.n_categories(),
            x.n_categories()
        )));
    }
    build(x, cfg, Some(stats))
}

fn build(x: &AnomalyTensor, cfg: &TrainConfig, fixed: Option<&NormStats>) -> Result<WindowedDataset> {
    let (t_total, t_window) = (x.n_slots(), cfg.t_window);
    if t_window == 0 {
        return Err(StsError::Config("t_window must be ≥ 1".into()));
    }
    if t_total <= t_window {
        return Err(StsError::Data(format!(
            "{t_total} slots are too few for a {t_window}-slot window; at least {} are required",
            t_window + 1
        )));
    }
    let n = t_total - t_window;
    let (a, b) = (cfg.split_ratio.0 as usize, cfg.split_ratio.1 as usize);
    if a == 0 {
        return Err(StsError::Config("split_ratio train part must be ≥ 1".into()));
    }
    let n_trainval = (n * a).div_ceil(a + b);
    let n_val = cfg.val_slots.min(n_trainval - 1);
    let n_train = n_trainval - n_val;
    let splits = (0..n)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_trainval {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    let stats = match fixed {
        Some(s) => s.clone(),
        None => NormStats::fit(x.values(), cfg.norm_kind, 0..t_window + n_train)?,
    };
    let normalized = stats.apply(x.values())?.values;
    Ok(WindowedDataset {
        raw: x.values().clone(),
        normalized,
        stats,
        t_window,
        targets: (t_window..t_total).collect(),
        splits,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn t_window(&self) -> usize {
        self.t_window
    }

    pub fn n_regions(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn n_categories(&self) -> usize {
        self.raw.shape()[2]
    }

    pub fn target_slot(&self, i: usize) -> usize {
        self.targets[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    /// Window indices of one split, chronological.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Stacks the given windows into one batch.
    pub fn batch(&self, windows: &[usize]) -> Result<Batch> {
        if windows.is_empty() {
            return Err(StsError::Contract("empty batch".into()));
        }
        let [n, t_total, c] = [self.raw.shape()[0], self.raw.shape()[1], self.raw.shape()[2]];
        let t = self.t_window;
        let b = windows.len();
        let mut inputs = Vec::with_capacity(b * n * t * c);
        let mut targets = Vec::with_capacity(b * n * c);
        let mut raw_targets = Vec::with_capacity(b * n * c);
        for &w in windows {
            let end = *self
                .targets
                .get(w)
                .ok_or_else(|| StsError::Argument(format!("window {w} out of range")))?;
            for r in 0..n {
                let row = r * t_total * c;
                inputs.extend_from_slice(&self.normalized.data()[row + (end - t) * c..row + end * c]);
                for k in 0..c {
                    let v = self.raw.data()[row + end * c + k];
                    raw_targets.push(v);
                    targets.push(v / self.stats.target_scale(k));
                }
            }
        }
        Ok(Batch {
            inputs: Tensor::new(vec![b, n, t, c], inputs)?,
            targets: Tensor::new(vec![b, n, c], targets)?,
            raw_targets: Tensor::new(vec![b, n, c], raw_targets)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn series(t: usize) -> AnomalyTensor {
        let v = (0..t * 2).map(|i| (i % 5) as f64).collect();
        AnomalyTensor::from_values(Tensor::new(vec![1, t, 2], v).unwrap()).unwrap()
    }

    fn cfg(t_window: usize) -> TrainConfig {
        TrainConfig {
            t_window,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_window() {
        let ds = make_windows(&series(31), &cfg(30)).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.indices(Split::Train), vec![0]);
    }

    #[test]
    fn forty_slots_split_seven_to_one() {
        let c = TrainConfig { val_slots: 2, ..cfg(30) };
        let ds = make_windows(&series(40), &c).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.target_slot(0), 30);
        assert_eq!(ds.target_slot(9), 39);
        assert_eq!(ds.indices(Split::Test), vec![9]);
        assert_eq!(ds.indices(Split::Val), vec![7, 8]);
        assert_eq!(ds.indices(Split::Train), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn too_short_names_minimum() {
        let err = make_windows(&series(30), &cfg(30)).unwrap_err();
        assert!(matches!(err, StsError::Data(ref m) if m.contains("31")), "{err}");
    }

    #[test]
    fn batch_layout() {
        let x = series(6);
        let c = TrainConfig { norm_kind: crate::features::NormKind::MinMax, ..cfg(2) };
        let ds = make_windows(&x, &c).unwrap();
        let b = ds.batch(&[1]).unwrap();
        assert_eq!(b.inputs.shape(), &[1, 1, 2, 2]);
        // window 1 targets slot 3 and reads slots 1, 2
        assert_eq!(b.raw_targets.data(), &[x.get(0, 3, 0), x.get(0, 3, 1)]);
        let s = ds.stats();
        for (k, &v) in b.inputs.data().iter().enumerate() {
            let (slot, cat) = (1 + k / 2, k % 2);
            let expect = (x.get(0, slot, cat) - s.min[cat]) / (s.max[cat] - s.min[cat]);
            assert!((v - expect).abs() < 1e-15);
        }
        for k in 0..2 {
            assert_eq!(b.targets.data()[k], b.raw_targets.data()[k] / s.target_scale(k));
        }
    }

    #[test]
    fn fixed_statistics_are_used_verbatim() {
        let x = series(12);
        let ds = make_windows(&x, &cfg(3)).unwrap();
        let mut stats = ds.stats().clone();
        stats.mu = vec![10.0, -4.0];
        let fixed = make_windows_with_stats(&x, &cfg(3), &stats).unwrap();
        assert_eq!(fixed.stats(), &stats);
        let b = fixed.batch(&[0]).unwrap();
        assert!((b.inputs.data()[0] - (x.get(0, 0, 0) - 10.0) / stats.sigma[0]).abs() < 1e-15);
        let mut narrow = stats.clone();
        narrow.mu.pop();
        narrow.sigma.pop();
        narrow.min.pop();
        narrow.max.pop();
        assert!(matches!(make_windows_with_stats(&x, &cfg(3), &narrow), Err(StsError::Config(_))));
    }

    proptest! {
        #[test]
        fn windows_are_contiguous_and_chronological(t_total in 3usize..80, t_window in 1usize..20, val in 0usize..10) {
            prop_assume!(t_total > t_window);
            let c = TrainConfig { val_slots: val, ..cfg(t_window) };
            let ds = make_windows(&series(t_total), &c).unwrap();
            prop_assert_eq!(ds.len(), t_total - t_window);
            let order = |s: Split| match s { Split::Train => 0, Split::Val => 1, Split::Test => 2 };
            for i in 1..ds.len() {
                prop_assert_eq!(ds.target_slot(i), ds.target_slot(i - 1) + 1);
                prop_assert!(order(ds.split(i)) >= order(ds.split(i - 1)));
            }
            prop_assert!(!ds.indices(Split::Train).is_empty());
            // Normalization never sees a validation or test target.
            let first_held_out = ds.indices(Split::Train).len() + t_window;
            let mut perturbed = series(t_total).values().clone();
            for v in perturbed.data_mut()[first_held_out * 2..].iter_mut() {
                *v += 7.0;
            }
            let ds2 = make_windows(&AnomalyTensor::from_values(perturbed).unwrap(), &c).unwrap();
            prop_assert_eq!(ds2.stats(), ds.stats());
        }
    }
}
