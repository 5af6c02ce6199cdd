//! Full forecaster: category embedding, STC stack and prediction head.

use rand::{Rng, SeedableRng};

use crate::error::{Result, StsError};
use crate::features::{category_embed, positional_encode, CategoryEmbeddingTable};
use crate::graph::RegionGraph;
use crate::multitask::{
    classification_loss, count_head, exposure_head, fuse_embeddings, linear_head,
    regression_loss_bucketed, threshold_mask, total_loss, LossConfig,
};
use crate::params::{BoundParams, ParamStore};
use crate::stc::{self, Components, DsaContext, LayerTrace, LayerVars, StcConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Model variant; each ablation drops one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    None,
    NoMsa,
    NoTrr,
    NoDsa,
    /// Single linear regression head with an unweighted squared error.
    NoMtp,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoMsa,
        Ablation::NoTrr,
        Ablation::NoDsa,
        Ablation::NoMtp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoMsa => "-MSA",
            Ablation::NoTrr => "-TRR",
            Ablation::NoDsa => "-DSA",
            Ablation::NoMtp => "-MTP",
        }
    }

    pub fn components(self) -> Components {
        Components {
            msa: self != Ablation::NoMsa,
            trr: self != Ablation::NoTrr,
            dsa: self != Ablation::NoDsa,
        }
    }

    pub fn multitask(self) -> bool {
        self != Ablation::NoMtp
    }
}

impl std::str::FromStr for Ablation {
    type Err = StsError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                StsError::Config(format!(
                    "unknown ablation '{s}' (expected none, -MSA, -TRR, -DSA or -MTP)"
                ))
            })
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where the count head's mask comes from during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Thresholded exposure probabilities.
    #[default]
    Predicted,
    /// Ground-truth exposure (`x > 0`).
    Teacher,
}

impl std::str::FromStr for MaskMode {
    type Err = StsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(MaskMode::Predicted),
            "teacher" => Ok(MaskMode::Teacher),
            other => Err(StsError::Config(format!("unknown mask_mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Predicted => "predicted",
            MaskMode::Teacher => "teacher",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_regions: usize,
    pub n_categories: usize,
    pub t_window: usize,
    pub stc: StcConfig,
    pub ablation: Ablation,
    pub loss: LossConfig,
}

/// One batch of windows.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Normalized history `[B, N, T, C]`.
    pub inputs: Tensor,
    /// Next-slot targets divided by the per-category target scale `[B, N, C]`.
    pub targets: Tensor,
    /// Next-slot targets in index units `[B, N, C]`.
    pub raw_targets: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the count mask is chosen for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    Predicted,
    Given(&'a [bool]),
}

/// Recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub layers: Vec<Var>,
    pub traces: Vec<LayerTrace>,
    pub fused: Var,
    /// Exposure probabilities `[B,N,C]`; absent for the single-task variant.
    pub p: Option<Var>,
    /// Count mask; all true for the single-task variant.
    pub z: Vec<bool>,
    /// Predictions on the target scale `[B,N,C]`.
    pub x_hat: Var,
}

/// Forecaster bound to a region graph.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    ctx: DsaContext,
    pe: Tensor,
}

impl Model {
    pub fn new(mut cfg: ModelConfig, graph: &RegionGraph) -> Result<Self> {
        cfg.stc.components = cfg.ablation.components();
        cfg.stc.validate()?;
        cfg.loss.validate()?;
        if graph.n_regions() != cfg.n_regions {
            return Err(StsError::Config(format!(
                "n_regions mismatch: config has {}, graph has {}",
                cfg.n_regions,
                graph.n_regions()
            )));
        }
        if cfg.t_window == 0 || cfg.n_categories == 0 {
            return Err(StsError::Config("t_window and n_categories must be ≥ 1".into()));
        }
        let ctx = DsaContext::new(graph, cfg.stc.dsa_self_loop);
        let pe = positional_encode(cfg.t_window, cfg.stc.d)?;
        Ok(Model { cfg, ctx, pe })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn context(&self) -> &DsaContext {
        &self.ctx
    }

    /// Fresh parameters in manifest order: category embedding, layers,
    /// exposure head (multi-task only), count head.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamStore {
        let (c, d) = (self.cfg.n_categories, self.cfg.stc.d);
        let mut store = ParamStore::new();
        store.push("embed.category", CategoryEmbeddingTable::init(c, d, rng).vectors);
        for l in 0..self.cfg.stc.layers {
            stc::init_layer_params(&mut store, l, &self.cfg.stc, rng);
        }
        let bound = 1.0 / (d as f64).sqrt();
        let head = |rng: &mut dyn rand::RngCore| {
            let data = (0..c * d).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(vec![c, d], data).expect("finite")
        };
        if self.cfg.ablation.multitask() {
            store.push("head.exposure", head(rng));
        }
        store.push("head.count", head(rng));
        store
    }

    /// Checks that `store` has exactly the layout this model expects.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let expected = self.init_params(&mut rng);
        if expected.names() != store.names() {
            return Err(StsError::Config(format!(
                "parameter manifest mismatch: expected {:?}, found {:?}",
                expected.names(),
                store.names()
            )));
        }
        for ((name, a), b) in expected.iter().zip(store.tensors()) {
            if a.shape() != b.shape() {
                return Err(StsError::Config(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        inputs: &Tensor,
        mask: MaskSource<'_>,
    ) -> Result<Forward> {
        let s = inputs.shape();
        if s.len() != 4
            || s[1] != self.cfg.n_regions
            || s[2] != self.cfg.t_window
            || s[3] != self.cfg.n_categories
        {
            return Err(StsError::Dimension(format!(
                "inputs {s:?} do not match [B, {}, {}, {}]",
                self.cfg.n_regions, self.cfg.t_window, self.cfg.n_categories
            )));
        }
        let table = params.var("embed.category")?;
        let e0 = category_embed(tape, inputs, table)?;
        let layer_vars = (0..self.cfg.stc.layers)
            .map(|l| LayerVars::bind(params, l))
            .collect::<Result<Vec<_>>>()?;
        let (layers, traces) = stc::stc_stack(tape, e0, &self.ctx, &self.pe, &layer_vars, &self.cfg.stc)?;
        let fused = fuse_embeddings(tape, &layers)?;
        let count_w = params.var("head.count")?;
        let (p, z, x_hat) = if self.cfg.ablation.multitask() {
            let exp_w = params.var("head.exposure")?;
            let p = exposure_head(tape, fused, exp_w)?;
            let z = match mask {
                MaskSource::Predicted => threshold_mask(tape.value(p), self.cfg.loss.tau),
                MaskSource::Given(m) => m.to_vec(),
            };
            let x_hat = count_head(tape, fused, &z, count_w)?;
            (Some(p), z, x_hat)
        } else {
            let x_hat = linear_head(tape, fused, count_w)?;
            let n = tape.value(x_hat).len();
            (None, vec![true; n], x_hat)
        };
        Ok(Forward {
            layers,
            traces,
            fused,
            p,
            z,
            x_hat,
        })
    }

    /// Training objective for a recorded forward pass. The weight penalty is
    /// included only when `with_penalty` is set, so a batch split across
    /// several tapes counts it once.
    pub fn loss(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        batch: &Batch,
        params: &BoundParams,
        with_penalty: bool,
    ) -> Result<Var> {
        let penalized: &[Var] = if with_penalty { params.vars() } else { &[] };
        let buckets: Vec<usize> = batch
            .raw_targets
            .data()
            .iter()
            .map(|&v| crate::multitask::bucket_of(v))
            .collect();
        match fwd.p {
            Some(p) => {
                let l_r = regression_loss_bucketed(tape, &batch.targets, &buckets, fwd.x_hat, &self.cfg.loss.eta)?;
                let l_c = classification_loss(tape, &batch.raw_targets, p)?;
                total_loss(tape, l_r, Some(l_c), penalized, &self.cfg.loss)
            }
            None => {
                let l_r = regression_loss_bucketed(tape, &batch.targets, &buckets, fwd.x_hat, &[1.0; 4])?;
                total_loss(tape, l_r, None, penalized, &self.cfg.loss)
            }
        }
    }
}
