//! Shared fixtures for the benchmarks.

use sts_core::data_io::{generate, SynthConfig};
use sts_core::trainer::{make_windows, WindowedDataset};
use sts_core::{RegionGraph, TrainConfig};

/// A small seeded dataset with its graph and training configuration.
pub fn fixture(rows: usize, cols: usize, n_slots: usize) -> (WindowedDataset, RegionGraph, TrainConfig) {
    let synth = SynthConfig { grid_rows: rows, grid_cols: cols, n_slots, ..SynthConfig::default() };
    let graph = synth.default_graph().expect("grid graph");
    let (x, _) = generate(&synth, &graph).expect("synthetic data");
    let cfg = TrainConfig { t_window: 8, d: 8, layers: 1, heads: 2, ..TrainConfig::default() };
    let ds = make_windows(&x, &cfg).expect("windows");
    (ds, graph, cfg)
}
