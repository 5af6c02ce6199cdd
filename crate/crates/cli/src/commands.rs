//! Command implementations. Each writes its artifacts and a run manifest
//! into an output directory and returns what it computed.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use sts_core::data_io::{export_events, generate, ingest, rebin, MetricsReport};
use sts_core::trainer::{
    attention_trace, build_model, evaluate, gradcheck, make_windows, make_windows_with_stats, train, zero_baseline, Checkpoint,
    GradcheckGroup, Split, TrainOutcome, WindowedDataset, EPOCH_LOG_HEADER,
};
use sts_core::{Ablation, AnomalyTensor, RegionGraph, Result, StsError};

use crate::manifest::RunManifest;
use crate::run_config::RunConfig;

pub const EVENTS_FILE: &str = "events.csv";
pub const GRAPH_FILE: &str = "graph.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.sts";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SPARSITY_FILE: &str = "sparsity.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const ATTENTION_FILE: &str = "attention.csv";

/// Largest region count and window accepted by `gradcheck`.
pub const GRADCHECK_MAX_REGIONS: usize = 6;
pub const GRADCHECK_MAX_WINDOW: usize = 6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_STEP: f64 = 1e-6;

/// Where the anomaly data comes from. Without an event file the configured
/// generator runs in memory.
#[derive(Clone, Copy, Debug, Default)]
pub struct DataSource<'a> {
    pub events: Option<&'a Path>,
    pub graph: Option<&'a Path>,
}

pub struct Loaded {
    pub x: AnomalyTensor,
    pub graph: RegionGraph,
    pub inputs: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| StsError::io(path.display().to_string(), e))
}

fn prepare(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| StsError::io(out.display().to_string(), e))
}

fn fmt4(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |v| format!("{v:.4}"))
}

fn metric_cells(m: &MetricsReport) -> String {
    format!("{},{},{},{}", fmt4(Some(m.mae)), fmt4(Some(m.rmse)), fmt4(m.mae_star), fmt4(m.rmse_star))
}

pub fn load_graph(rc: &RunConfig, src: &DataSource) -> Result<RegionGraph> {
    match src.graph {
        Some(p) => RegionGraph::load(p),
        None => rc.synth.default_graph(),
    }
}

pub fn load_data(rc: &RunConfig, src: &DataSource) -> Result<Loaded> {
    let graph = load_graph(rc, src)?;
    let mut inputs: Vec<PathBuf> = src.graph.iter().map(|p| p.to_path_buf()).collect();
    let x = match src.events {
        Some(path) => {
            let f = File::open(path).map_err(|e| StsError::io(path.display().to_string(), e))?;
            let (x, report) = ingest(f, &graph, &rc.layout())?;
            if report.dropped > 0 || !report.errors.is_empty() {
                eprintln!(
                    "ingest: {} records, {} accepted, {} outside the slot range, {} rejected",
                    report.records,
                    report.accepted,
                    report.dropped,
                    report.errors.len()
                );
            }
            inputs.push(path.to_path_buf());
            x
        }
        None => {
            let (x, report) = generate(&rc.synth, &graph)?;
            if let Some(w) = report.warning {
                eprintln!("warning: {w}");
            }
            x
        }
    };
    Ok(Loaded { x, graph, inputs })
}

fn manifest(command: &str, rc: &RunConfig, loaded_inputs: &[PathBuf], extra_inputs: &[&Path]) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, rc.seed, rc.to_text());
    for p in loaded_inputs {
        m.input(p)?;
    }
    for p in extra_inputs {
        m.input(p)?;
    }
    Ok(m)
}

fn finish(mut m: RunManifest, out: &Path, artifacts: &[PathBuf]) -> Result<()> {
    let config = out.join(CONFIG_FILE);
    write_file(&config, &m.config)?;
    m.artifact(&config)?;
    for a in artifacts {
        m.artifact(a)?;
    }
    m.write(out)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSummary {
    pub zero_ratio: f64,
    pub events: usize,
    pub gate_offset: f64,
    pub warning: Option<String>,
}

impl GenerateSummary {
    pub fn to_text(&self) -> String {
        format!("zero_ratio={:.4}\nevents={}\ngate_offset={:.4}\n", self.zero_ratio, self.events, self.gate_offset)
    }
}

/// Writes a synthetic event log and its graph spec.
pub fn cmd_generate(rc: &RunConfig, graph: Option<&Path>, out: &Path) -> Result<GenerateSummary> {
    prepare(out)?;
    let src = DataSource { events: None, graph };
    let g = load_graph(rc, &src)?;
    let (x, report) = generate(&rc.synth, &g)?;
    let events_path = out.join(EVENTS_FILE);
    let f = File::create(&events_path).map_err(|e| StsError::io(events_path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    let events = export_events(&x, &g, false, &mut w)?;
    std::io::Write::flush(&mut w).map_err(|e| StsError::io(events_path.display().to_string(), e))?;
    drop(w);
    let graph_path = out.join(GRAPH_FILE);
    write_file(&graph_path, g.to_spec())?;
    let m = manifest("generate", rc, &src.graph.map(|p| vec![p.to_path_buf()]).unwrap_or_default(), &[])?;
    finish(m, out, &[events_path, graph_path])?;
    Ok(GenerateSummary {
        zero_ratio: x.zero_ratio(),
        events,
        gate_offset: report.gate_offset,
        warning: report.warning,
    })
}

pub fn epoch_log_csv(outcome: &TrainOutcome) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for e in &outcome.log {
        s.push_str(&e.to_csv_row());
        s.push('\n');
    }
    s
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub dataset: WindowedDataset,
    pub checkpoint: Checkpoint,
}

/// Trains on the configured data and writes the best checkpoint and the
/// epoch log.
pub fn cmd_train(rc: &RunConfig, src: &DataSource, out: &Path) -> Result<TrainRun> {
    prepare(out)?;
    let data = load_data(rc, src)?;
    let ds = make_windows(&data.x, &rc.train)?;
    let outcome = train(&ds, &data.graph, &rc.train)?;
    let ck = Checkpoint::from_outcome(&outcome, &rc.train, data.x.category_names.clone());
    let ck_path = out.join(CHECKPOINT_FILE);
    ck.save(&ck_path)?;
    let log_path = out.join(EPOCH_LOG_FILE);
    write_file(&log_path, epoch_log_csv(&outcome))?;
    let m = manifest("train", rc, &data.inputs, &[])?;
    finish(m, out, &[ck_path, log_path])?;
    Ok(TrainRun {
        outcome,
        dataset: ds,
        checkpoint: ck,
    })
}

/// Rejects a checkpoint whose shapes do not fit the data and graph.
pub fn check_compatible(ck: &Checkpoint, x: &AnomalyTensor, graph: &RegionGraph) -> Result<sts_core::Model> {
    if ck.n_regions != graph.n_regions() {
        return Err(StsError::Config(format!(
            "n_regions mismatch: checkpoint has {}, data has {}",
            ck.n_regions,
            graph.n_regions()
        )));
    }
    if ck.n_categories() != x.n_categories() {
        return Err(StsError::Config(format!(
            "n_categories mismatch: checkpoint has {}, data has {}",
            ck.n_categories(),
            x.n_categories()
        )));
    }
    let (model, _) = build_model(&ck.config, graph, ck.n_categories())?;
    model.check_params(&ck.params)?;
    Ok(model)
}

/// `eval` options beyond the data source.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions<'a> {
    pub checkpoint: Option<&'a Path>,
    pub baseline_zero: bool,
    pub split: Split,
}

pub fn cmd_eval(rc: &RunConfig, src: &DataSource, opts: EvalOptions, out: &Path) -> Result<MetricsReport> {
    prepare(out)?;
    let data = load_data(rc, src)?;
    let (report, extra) = match opts.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let model = check_compatible(&ck, &data.x, &data.graph)?;
            let ds = make_windows_with_stats(&data.x, &ck.config, &ck.stats)?;
            let idx = split_windows(&ds, opts.split)?;
            let report = if opts.baseline_zero {
                zero_baseline(&ds, &idx)?
            } else {
                evaluate(&model, &ck.params, &ds, &idx, ck.config.windows_per_pass)?
            };
            (report, vec![path])
        }
        None if opts.baseline_zero => {
            let ds = make_windows(&data.x, &rc.train)?;
            (zero_baseline(&ds, &split_windows(&ds, opts.split)?)?, vec![])
        }
        None => return Err(StsError::Argument("eval needs --checkpoint unless --baseline zero is given".into())),
    };
    let path = out.join(METRICS_FILE);
    write_file(&path, report.to_text())?;
    let m = manifest("eval", rc, &data.inputs, &extra)?;
    finish(m, out, &[path])?;
    Ok(report)
}

fn split_windows(ds: &WindowedDataset, split: Split) -> Result<Vec<usize>> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(StsError::Data(format!("the {split:?} split has no windows")));
    }
    Ok(idx)
}

/// Trains `cfg` on `ds` and scores the test split.
fn train_and_test(ds: &WindowedDataset, graph: &RegionGraph, cfg: &sts_core::TrainConfig) -> Result<MetricsReport> {
    let outcome = train(ds, graph, cfg)?;
    evaluate(&outcome.model, &outcome.params, ds, &split_windows(ds, Split::Test)?, cfg.windows_per_pass)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub metrics: MetricsReport,
}

pub const ABLATION_HEADER: &str = "variant,mae,rmse,mae_star,rmse_star";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.variant, metric_cells(&r.metrics)));
    }
    s
}

/// Trains every variant on the same data and seed and scores each on the
/// test split.
pub fn cmd_ablate(rc: &RunConfig, src: &DataSource, out: &Path) -> Result<Vec<AblationRow>> {
    prepare(out)?;
    let data = load_data(rc, src)?;
    let ds = make_windows(&data.x, &rc.train)?;
    let mut rows = Vec::new();
    for variant in Ablation::ALL {
        let cfg = sts_core::TrainConfig { ablation: variant, ..rc.train.clone() };
        rows.push(AblationRow {
            variant,
            metrics: train_and_test(&ds, &data.graph, &cfg)?,
        });
    }
    let path = out.join(ABLATION_FILE);
    write_file(&path, ablation_csv(&rows))?;
    finish(manifest("ablate", rc, &data.inputs, &[])?, out, &[path])?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityRow {
    pub factor: usize,
    pub zero_ratio: f64,
    pub metrics: MetricsReport,
}

pub const SPARSITY_HEADER: &str = "factor,zero_ratio,mae,rmse,mae_star,rmse_star";

pub fn sparsity_csv(rows: &[SparsityRow]) -> String {
    let mut s = format!("{SPARSITY_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{:.4},{}\n", r.factor, r.zero_ratio, metric_cells(&r.metrics)));
    }
    s
}

/// Coarsens the slot axis by each factor in turn, then trains and tests.
pub fn cmd_sparsity(rc: &RunConfig, src: &DataSource, factors: &[usize], out: &Path) -> Result<Vec<SparsityRow>> {
    if factors.is_empty() {
        return Err(StsError::Argument("at least one rebin factor is required".into()));
    }
    if let Some(f) = factors.iter().find(|&&f| f == 0) {
        return Err(StsError::Argument(format!("rebin factors must be ≥ 1, got {f}")));
    }
    prepare(out)?;
    let data = load_data(rc, src)?;
    let mut rows = Vec::new();
    for &factor in factors {
        let (x, dropped) = rebin(&data.x, factor)?;
        if dropped > 0 {
            eprintln!("factor {factor}: {dropped} trailing slots dropped");
        }
        let ds = make_windows(&x, &rc.train)?;
        rows.push(SparsityRow {
            factor,
            zero_ratio: x.zero_ratio(),
            metrics: train_and_test(&ds, &data.graph, &rc.train)?,
        });
    }
    let path = out.join(SPARSITY_FILE);
    write_file(&path, sparsity_csv(&rows))?;
    finish(manifest("sparsity", rc, &data.inputs, &[])?, out, &[path])?;
    Ok(rows)
}

pub const GRADCHECK_HEADER: &str = "group,n_params,max_error";

/// Finite-difference check of every parameter group on one generated
/// window. Fails with a numeric error when any group exceeds the tolerance.
pub fn cmd_gradcheck(rc: &RunConfig, graph: Option<&Path>, corrupt: bool, out: &Path) -> Result<Vec<GradcheckGroup>> {
    let src = DataSource { events: None, graph };
    let g = load_graph(rc, &src)?;
    let t = rc.train.t_window;
    if g.n_regions() > GRADCHECK_MAX_REGIONS || t > GRADCHECK_MAX_WINDOW {
        return Err(StsError::Config(format!(
            "gradcheck is limited to toy sizes (N ≤ {GRADCHECK_MAX_REGIONS}, T ≤ {GRADCHECK_MAX_WINDOW}); got N = {}, T = {t}",
            g.n_regions()
        )));
    }
    prepare(out)?;
    let synth = sts_core::data_io::SynthConfig {
        n_slots: t + 2,
        ..rc.synth.clone()
    };
    let (x, _) = generate(&synth, &g)?;
    let ds = make_windows(&x, &rc.train)?;
    let (model, params) = build_model(&rc.train, &g, x.n_categories())?;
    let batch = ds.batch(&[0])?;
    let groups = gradcheck(&model, &params, &batch, GRADCHECK_STEP, corrupt)?;
    let mut csv = format!("{GRADCHECK_HEADER}\n");
    for gr in &groups {
        csv.push_str(&format!("{},{},{:e}\n", gr.name, gr.n_params, gr.max_error));
    }
    let path = out.join(GRADCHECK_FILE);
    write_file(&path, csv)?;
    let inputs: Vec<PathBuf> = graph.iter().map(|p| p.to_path_buf()).collect();
    finish(manifest("gradcheck", rc, &inputs, &[])?, out, &[path])?;
    Ok(groups)
}

/// Fails when any group exceeds the tolerance, naming the worst one.
pub fn gradcheck_verdict(groups: &[GradcheckGroup]) -> Result<()> {
    let worst = groups.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error));
    match worst {
        Some(w) if !(w.max_error < GRADCHECK_TOLERANCE) => Err(StsError::Numeric(format!(
            "gradient check failed: group {} has relative error {:e} (limit {GRADCHECK_TOLERANCE:e})",
            w.name, w.max_error
        ))),
        _ => Ok(()),
    }
}

/// Writes the attention weights of the last test window (or the last
/// window when there is no test split).
pub fn cmd_export_attention(rc: &RunConfig, src: &DataSource, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    prepare(out)?;
    let data = load_data(rc, src)?;
    let ck = Checkpoint::load(checkpoint)?;
    let model = check_compatible(&ck, &data.x, &data.graph)?;
    let ds = make_windows_with_stats(&data.x, &ck.config, &ck.stats)?;
    let window = ds.indices(Split::Test).last().copied().unwrap_or(ds.len() - 1);
    let trace = attention_trace(&model, &ck.params, &ds, window)?;
    let path = out.join(ATTENTION_FILE);
    let f = File::create(&path).map_err(|e| StsError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(f);
    trace.write_csv(&mut w).map_err(|e| StsError::io(path.display().to_string(), e))?;
    std::io::Write::flush(&mut w).map_err(|e| StsError::io(path.display().to_string(), e))?;
    drop(w);
    finish(manifest("export-attention", rc, &data.inputs, &[checkpoint])?, out, &[path.clone()])?;
    Ok(path)
}
