//! Windowed training with Adam and per-epoch learning-rate decay.

mod adam;
mod checkpoint;
mod config;
mod windows;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use windows::{make_windows, make_windows_with_stats, Split, WindowedDataset};

use crate::data_io::{MetricsAccumulator, MetricsReport};
use crate::error::{Result, StsError};
use crate::features::NormStats;
use crate::graph::RegionGraph;
use crate::model::{Batch, MaskMode, MaskSource, Model};
use crate::params::ParamStore;
use crate::stc::AttentionTrace;
use crate::tensor::{Tape, Tensor};

/// Stream id mixed into the seed for batch shuffling.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// `lr0 · decay^epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}

/// Model for `cfg` on `graph` with freshly initialized parameters.
pub fn build_model(cfg: &TrainConfig, graph: &RegionGraph, n_categories: usize) -> Result<(Model, ParamStore)> {
    cfg.validate()?;
    let model = Model::new(cfg.model_config(graph.n_regions(), n_categories), graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = model.init_params(&mut rng);
    Ok((model, params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean objective per training window, measured during the epoch.
    pub train_loss: f64,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
    /// Steps whose gradient was clipped.
    pub clipped_steps: usize,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,train_loss,val_mae,val_rmse";

impl EpochLog {
    pub fn to_csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |v| format!("{v:?}"));
        format!(
            "{},{:?},{:?},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.val_mae),
            opt(self.val_rmse)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters after the epoch with the lowest validation MAE, or after
    /// the last epoch when there is no validation split.
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub stats: NormStats,
}

fn diverged(epoch: usize, step: usize, e: StsError) -> StsError {
    match e {
        StsError::Numeric(m) => {
            StsError::Numeric(format!("training diverged at epoch {epoch}, step {step}: {m}"))
        }
        other => other,
    }
}

fn teacher_mask(batch: &Batch) -> Vec<bool> {
    batch.raw_targets.data().iter().map(|&v| v > 0.0).collect()
}

/// Summed objective and gradients over `windows`, recorded `per_pass`
/// windows per tape and accumulated in order.
pub fn batch_gradients(
    model: &Model,
    params: &ParamStore,
    ds: &WindowedDataset,
    windows: &[usize],
    mask_mode: MaskMode,
    per_pass: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (k, chunk) in windows.chunks(per_pass.max(1)).enumerate() {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let batch = ds.batch(chunk)?;
        let mask = teacher_mask(&batch);
        let source = match mask_mode {
            MaskMode::Predicted => MaskSource::Predicted,
            MaskMode::Teacher => MaskSource::Given(&mask),
        };
        let fwd = model.forward(&mut tape, &bound, &batch.inputs, source)?;
        let loss = model.loss(&mut tape, &fwd, &batch, &bound, k == 0)?;
        total += tape.value(loss).item();
        let g = tape.backward(loss)?;
        for (acc, part) in grads.iter_mut().zip(bound.collect_grads(&g)) {
            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
    }
    if !total.is_finite() {
        return Err(StsError::Numeric(format!("loss is {total}")));
    }
    Ok((total, grads))
}

/// Scales `grads` to global norm `max_norm` if larger. Returns whether it
/// clipped.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> bool {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm {
        return false;
    }
    let s = max_norm / norm;
    for g in grads {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    true
}

/// Index-scale predictions and truths for `windows`, flattened in window
/// order as `[window, region, category]`.
pub fn predict(
    model: &Model,
    params: &ParamStore,
    ds: &WindowedDataset,
    windows: &[usize],
    per_pass: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for chunk in windows.chunks(per_pass.max(1)) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let batch = ds.batch(chunk)?;
        let fwd = model.forward(&mut tape, &bound, &batch.inputs, MaskSource::Predicted)?;
        let p = ds.stats().unscale_prediction(tape.value(fwd.x_hat))?;
        truth.extend_from_slice(batch.raw_targets.data());
        pred.extend_from_slice(p.data());
    }
    Ok((truth, pred))
}

pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    ds: &WindowedDataset,
    windows: &[usize],
    per_pass: usize,
) -> Result<MetricsReport> {
    let (truth, pred) = predict(model, params, ds, windows, per_pass)?;
    let mut acc = MetricsAccumulator::new();
    acc.add(&truth, &pred)?;
    acc.finish()
}

/// Metrics of the all-zero predictor on `windows`.
pub fn zero_baseline(ds: &WindowedDataset, windows: &[usize]) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    for chunk in windows.chunks(64) {
        for &v in ds.batch(chunk)?.raw_targets.data() {
            acc.push(v, 0.0);
        }
    }
    acc.finish()
}

/// Attention weights of one window.
pub fn attention_trace(model: &Model, params: &ParamStore, ds: &WindowedDataset, window: usize) -> Result<AttentionTrace> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let batch = ds.batch(&[window])?;
    let fwd = model.forward(&mut tape, &bound, &batch.inputs, MaskSource::Predicted)?;
    AttentionTrace::from_layers(&tape, &fwd.traces, model.context(), 0)
}

pub fn train(ds: &WindowedDataset, graph: &RegionGraph, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(ds, graph, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    ds: &WindowedDataset,
    graph: &RegionGraph,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let (model, mut params) = build_model(cfg, graph, ds.n_categories())?;
    let mut train_idx = ds.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(StsError::Data("training split is empty".into()));
    }
    let val_idx = ds.indices(Split::Val);
    let batch_size = cfg.batch_size.unwrap_or(train_idx.len()).min(train_idx.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        if batch_size < train_idx.len() {
            train_idx.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        let mut clipped = 0;
        for batch in train_idx.chunks(batch_size) {
            let (loss, mut grads) =
                batch_gradients(&model, &params, ds, batch, cfg.mask_mode, cfg.windows_per_pass)
                    .map_err(|e| diverged(epoch, step, e))?;
            if let Some(max) = cfg.grad_clip {
                clipped += usize::from(clip_gradients(&mut grads, max));
            }
            adam_step(&mut params, &grads, &mut adam, lr)?;
            if params.tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged(epoch, step, StsError::Numeric("parameters became non-finite".into())));
            }
            loss_sum += loss;
            step += 1;
        }
        let (val_mae, val_rmse) = if val_idx.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&model, &params, ds, &val_idx, cfg.windows_per_pass)
                .map_err(|e| diverged(epoch, step, e))?;
            (Some(r.mae), Some(r.rmse))
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train_idx.len() as f64,
            val_mae,
            val_rmse,
            clipped_steps: clipped,
        };
        on_epoch(&entry);
        log.push(entry);
        match val_mae {
            Some(m) if best.as_ref().is_none_or(|b| m < b.1) => best = Some((epoch, m, params.clone())),
            Some(_) => {}
            None => best = Some((epoch, f64::NAN, params.clone())),
        }
    }
    let (best_epoch, best_val_mae, params) = match best {
        Some((e, m, p)) => (Some(e), (!m.is_nan()).then_some(m), p),
        None => (None, None, params),
    };
    Ok(TrainOutcome {
        model,
        params,
        log,
        best_epoch,
        best_val_mae,
        stats: ds.stats().clone(),
    })
}

/// Finite-difference check of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckGroup {
    pub name: String,
    pub n_params: usize,
    /// `max |analytic − numeric| / max(1, |analytic|)` over the group.
    pub max_error: f64,
}

/// Layer parameters group by component (`layer0.msa`); others stand alone.
fn group_of(name: &str) -> &str {
    if name.starts_with("layer") {
        name.rsplit_once('.').map_or(name, |(g, _)| g)
    } else {
        name
    }
}

/// Central differences of the training objective on `batch` against
/// reverse-mode gradients, per parameter group. The count mask is fixed at
/// its value for the unperturbed parameters.
pub fn gradcheck(model: &Model, params: &ParamStore, batch: &Batch, h: f64, faulty: bool) -> Result<Vec<GradcheckGroup>> {
    let mut tape = if faulty { Tape::with_faulty_sigmoid_backward() } else { Tape::new() };
    let bound = params.bind(&mut tape, true);
    let fwd = model.forward(&mut tape, &bound, &batch.inputs, MaskSource::Predicted)?;
    let mask = fwd.z.clone();
    let loss = model.loss(&mut tape, &fwd, batch, &bound, true)?;
    let grads = bound.collect_grads(&tape.backward(loss)?);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let fwd = model.forward(&mut tape, &bound, &batch.inputs, MaskSource::Given(&mask))?;
        let loss = model.loss(&mut tape, &fwd, batch, &bound, true)?;
        Ok(tape.value(loss).item())
    };

    let mut groups: Vec<GradcheckGroup> = Vec::new();
    let mut work = params.clone();
    for (i, name) in params.names().iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..params.tensors()[i].len() {
            let orig = params.tensors()[i].data()[j];
            work.tensors_mut()[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grads[i].data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        let g = group_of(name);
        match groups.iter_mut().find(|x| x.name == g) {
            Some(x) => {
                x.n_params += params.tensors()[i].len();
                x.max_error = x.max_error.max(worst);
            }
            None => groups.push(GradcheckGroup {
                name: g.to_string(),
                n_params: params.tensors()[i].len(),
                max_error: worst,
            }),
        }
    }
    Ok(groups)
}
