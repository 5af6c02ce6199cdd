//! Stacked spatiotemporal-semantic layers.
//!
//! Every function here works on batched feature tensors of shape
//! `[B, N, T, C, d]` (batch, region, time slot, category, hidden) recorded on
//! a [`Tape`]. A single sample is simply `B = 1`.
//!
//! One layer is `dsa ∘ trr ∘ msa`:
//! * **msa**: multi-head self-attention across the category axis,
//!   independently for each (region, slot);
//! * **trr**: a bias-free GRU scanning the slots of each (region, category)
//!   with a sigmoid read-out at every slot;
//! * **dsa**: graph-attention edge weights over each region's neighborhood
//!   combined with positional-encoded cross-attention from a region's
//!   sequence onto each neighbor's sequence, aggregated and squashed.

mod trace;

use rand::Rng;

pub use trace::{AttentionKind, AttentionTrace, TraceRow};

use crate::error::{Result, StsError};
use crate::graph::RegionGraph;
use crate::params::{ParamStore, BoundParams};
use crate::tensor::{Tape, Tensor, Var};

/// Negative slope of the LeakyReLU in graph-attention scoring.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Nonlinearity applied after neighborhood aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DsaActivation {
    #[default]
    Sigmoid,
    Tanh,
    Identity,
}

impl std::str::FromStr for DsaActivation {
    type Err = StsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(StsError::Config(format!("unknown dsa_activation '{other}'"))),
        }
    }
}

impl std::fmt::Display for DsaActivation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sigmoid => "sigmoid",
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        })
    }
}

/// Which components a layer runs; a disabled component is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub msa: bool,
    pub trr: bool,
    pub dsa: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            msa: true,
            trr: true,
            dsa: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StcConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub dsa_self_loop: bool,
    pub dsa_activation: DsaActivation,
    pub components: Components,
}

impl StcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(StsError::Config(format!(
                "hidden size d={} must be a positive multiple of heads H={}",
                self.d, self.heads
            )));
        }
        if self.d % 2 != 0 {
            return Err(StsError::Config(format!(
                "hidden size d={} must be even for positional encoding",
                self.d
            )));
        }
        if self.layers == 0 {
            return Err(StsError::Config("at least one STC layer is required".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

/// Appends the parameters of layer `l` to `store`, in manifest order.
pub fn init_layer_params(store: &mut ParamStore, l: usize, cfg: &StcConfig, rng: &mut impl Rng) {
    let (d, h, dh) = (cfg.d, cfg.heads, cfg.head_dim());
    if cfg.components.msa {
        for w in ["wq", "wk", "wv"] {
            store.push(format!("layer{l}.msa.{w}"), uniform(&[h, dh, d], d, rng));
        }
        store.push(format!("layer{l}.msa.wo"), uniform(&[d, d], d, rng));
    }
    if cfg.components.trr {
        for w in ["wr", "wz", "wh"] {
            store.push(format!("layer{l}.trr.{w}"), uniform(&[d, 2 * d], 2 * d, rng));
        }
        store.push(format!("layer{l}.trr.wo"), uniform(&[d, d], d, rng));
    }
    if cfg.components.dsa {
        store.push(format!("layer{l}.gat.w"), uniform(&[d, d], d, rng));
        store.push(format!("layer{l}.gat.a"), uniform(&[2 * d], 2 * d, rng));
        for w in ["wq", "wk", "wv"] {
            store.push(format!("layer{l}.nta.{w}"), uniform(&[h, dh, d], d, rng));
        }
        store.push(format!("layer{l}.nta.wo"), uniform(&[d, d], d, rng));
    }
}

/// Semantic attention weights `W^Q_h, W^K_h, W^V_h` (stacked H×(d/H)×d) and
/// the output map `W^O` (d×d).
#[derive(Clone, Copy, Debug)]
pub struct MsaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// GRU gate matrices (d×2d) and read-out (d×d).
#[derive(Clone, Copy, Debug)]
pub struct TrrVars {
    pub wr: Var,
    pub wz: Var,
    pub wh: Var,
    pub wo: Var,
}

/// Graph-attention `W` (d×d), `a` (2d) and the neighbor temporal attention
/// projections.
#[derive(Clone, Copy, Debug)]
pub struct DsaVars {
    pub gat_w: Var,
    pub gat_a: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub msa: Option<MsaVars>,
    pub trr: Option<TrrVars>,
    pub dsa: Option<DsaVars>,
}

impl LayerVars {
    pub fn bind(bound: &BoundParams, l: usize) -> Result<Self> {
        let g = |name: String| bound.var(&name);
        let msa = if bound.contains(&format!("layer{l}.msa.wq")) {
            Some(MsaVars {
                wq: g(format!("layer{l}.msa.wq"))?,
                wk: g(format!("layer{l}.msa.wk"))?,
                wv: g(format!("layer{l}.msa.wv"))?,
                wo: g(format!("layer{l}.msa.wo"))?,
            })
        } else {
            None
        };
        let trr = if bound.contains(&format!("layer{l}.trr.wr")) {
            Some(TrrVars {
                wr: g(format!("layer{l}.trr.wr"))?,
                wz: g(format!("layer{l}.trr.wz"))?,
                wh: g(format!("layer{l}.trr.wh"))?,
                wo: g(format!("layer{l}.trr.wo"))?,
            })
        } else {
            None
        };
        let dsa = if bound.contains(&format!("layer{l}.gat.w")) {
            Some(DsaVars {
                gat_w: g(format!("layer{l}.gat.w"))?,
                gat_a: g(format!("layer{l}.gat.a"))?,
                wq: g(format!("layer{l}.nta.wq"))?,
                wk: g(format!("layer{l}.nta.wk"))?,
                wv: g(format!("layer{l}.nta.wv"))?,
                wo: g(format!("layer{l}.nta.wo"))?,
            })
        } else {
            None
        };
        Ok(LayerVars { msa, trr, dsa })
    }
}

/// Precomputed neighborhood structure for the DSA component.
///
/// Ordered (target, neighbor) pairs enumerate `𝒩⁺(i)` for every region `i`,
/// grouped by target and sorted by neighbor.
#[derive(Clone, Debug)]
pub struct DsaContext {
    pub n_regions: usize,
    pub self_loop: bool,
    pub targets: Vec<usize>,
    pub neighbors: Vec<usize>,
    /// Row-major N×N support flags.
    pub support: Vec<bool>,
    /// N×P one-hot, `[j, p] = 1` iff pair `p` has neighbor `j`.
    gather: Option<Tensor>,
    /// N×P one-hot, `[i, p] = 1` iff pair `p` has target `i`.
    owner: Option<Tensor>,
}

impl DsaContext {
    pub fn new(graph: &RegionGraph, self_loop: bool) -> Self {
        let n = graph.n_regions();
        let mut targets = Vec::new();
        let mut neighbors = Vec::new();
        let mut support = vec![false; n * n];
        for i in 0..n {
            for j in graph.support(i, self_loop) {
                targets.push(i);
                neighbors.push(j);
                support[i * n + j] = true;
            }
        }
        let p = targets.len();
        let (gather, owner) = if p == 0 {
            (None, None)
        } else {
            let mut g = vec![0.0; n * p];
            let mut o = vec![0.0; n * p];
            for k in 0..p {
                g[neighbors[k] * p + k] = 1.0;
                o[targets[k] * p + k] = 1.0;
            }
            (
                Some(Tensor::new(vec![n, p], g).expect("finite")),
                Some(Tensor::new(vec![n, p], o).expect("finite")),
            )
        };
        DsaContext {
            n_regions: n,
            self_loop,
            targets,
            neighbors,
            support,
            gather,
            owner,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.targets.len()
    }
}

fn feature_dims(tape: &Tape, x: Var) -> Result<[usize; 5]> {
    let s = tape.shape(x);
    <[usize; 5]>::try_from(s).map_err(|_| {
        StsError::Dimension(format!("feature tensor must be [B,N,T,C,d], got {s:?}"))
    })
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(StsError::Config(format!(
            "hidden size {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Projects the last axis through stacked per-head weights `w` (H×dh×d) and
/// splits heads out: `[..., L, d]` → `[..., H, L, dh]`.
fn project_heads(tape: &mut Tape, x: Var, w: Var, heads: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = shape[shape.len() - 1];
    let dh = d / heads;
    let w2 = tape.reshape(w, &[d, d])?;
    let y = tape.matmul_nt(x, w2)?;
    let mut split = shape.clone();
    split.pop();
    split.push(heads);
    split.push(dh);
    let y = tape.reshape(y, &split)?;
    let r = split.len();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 3, r - 2);
    tape.permute(y, &perm)
}

/// `[..., H, L, dh]` → `[..., L, d]` then through `W^O`.
fn merge_heads(tape: &mut Tape, x: Var, wo: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 3, r - 2);
    let y = tape.permute(x, &perm)?;
    let mut merged = shape[..r - 3].to_vec();
    merged.push(shape[r - 2]);
    merged.push(shape[r - 3] * shape[r - 1]);
    let y = tape.reshape(y, &merged)?;
    tape.matmul_nt(y, wo)
}

/// Scaled dot-product attention over heads already split out.
/// Returns (output `[..., H, Lq, dh]`, weights `[..., H, Lq, Lk]`).
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dh = *tape.shape(q).last().expect("rank ≥ 1");
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let last = tape.shape(scores).len() - 1;
    let alpha = tape.softmax(scores, last)?;
    let out = tape.matmul(alpha, v)?;
    Ok((out, alpha))
}

/// Multi-head self-attention across categories.
///
/// Returns `M` (same shape as `e`) and the weights `[B,N,T,H,C,C]`.
pub fn msa_forward(tape: &mut Tape, e: Var, p: &MsaVars, heads: usize) -> Result<(Var, Var)> {
    let [_, _, _, _, d] = feature_dims(tape, e)?;
    check_heads(d, heads)?;
    let q = project_heads(tape, e, p.wq, heads)?;
    let k = project_heads(tape, e, p.wk, heads)?;
    let v = project_heads(tape, e, p.wv, heads)?;
    let (o, alpha) = attend(tape, q, k, v)?;
    let m = merge_heads(tape, o, p.wo)?;
    Ok((m, alpha))
}

/// GRU over the slot axis for each (batch, region, category), starting
/// from a zero state, with output `σ(W_o h_t)` at every slot.
pub fn trr_forward(tape: &mut Tape, m: Var, p: &TrrVars) -> Result<Var> {
    let [b, n, t, c, d] = feature_dims(tape, m)?;
    let s = b * n * c;
    let seq = tape.permute(m, &[2, 0, 1, 3, 4])?;
    let seq = tape.reshape(seq, &[t, s, d])?;
    let mut h = tape.constant(Tensor::zeros(&[s, d]));
    let mut outs = Vec::with_capacity(t);
    for step in 0..t {
        let x = tape.narrow(seq, 0, step, 1)?;
        let x = tape.reshape(x, &[s, d])?;
        let hx = tape.concat(&[h, x], 1)?;
        let r = tape.matmul_nt(hx, p.wr)?;
        let r = tape.sigmoid(r)?;
        let z = tape.matmul_nt(hx, p.wz)?;
        let z = tape.sigmoid(z)?;
        let rh = tape.mul(r, h)?;
        let rhx = tape.concat(&[rh, x], 1)?;
        let cand = tape.matmul_nt(rhx, p.wh)?;
        let cand = tape.tanh(cand)?;
        // (1 - z) * h + z * cand
        let delta = tape.sub(cand, h)?;
        let delta = tape.mul(z, delta)?;
        h = tape.add(h, delta)?;
        let o = tape.matmul_nt(h, p.wo)?;
        let o = tape.sigmoid(o)?;
        outs.push(tape.reshape(o, &[1, s, d])?);
    }
    let y = tape.concat(&outs, 0)?;
    let y = tape.reshape(y, &[t, b, n, c, d])?;
    tape.permute(y, &[1, 2, 0, 3, 4])
}

/// Graph-attention edge weights `[B, N, N]`.
///
/// Region features are `m̃` mean-pooled over slots and categories; scores
/// `LeakyReLU(aᵀ[W f_i ‖ W f_j])` are softmax-normalized over the support
/// of each row and exactly zero elsewhere.
pub fn gat_weights(tape: &mut Tape, mt: Var, ctx: &DsaContext, p: &DsaVars) -> Result<Var> {
    let [b, n, _, _, d] = feature_dims(tape, mt)?;
    if n != ctx.n_regions {
        return Err(StsError::Dimension(format!(
            "features have {n} regions but the graph has {}",
            ctx.n_regions
        )));
    }
    let f = tape.mean(mt, 3)?;
    let f = tape.mean(f, 2)?;
    let wf = tape.matmul_nt(f, p.gat_w)?;
    let a_src = tape.narrow(p.gat_a, 0, 0, d)?;
    let a_src = tape.reshape(a_src, &[d, 1])?;
    let a_dst = tape.narrow(p.gat_a, 0, d, d)?;
    let a_dst = tape.reshape(a_dst, &[d, 1])?;
    let s_src = tape.matmul(wf, a_src)?; // [B,N,1]
    let s_dst = tape.matmul(wf, a_dst)?;
    let ones_row = tape.constant(Tensor::ones(&[1, n]));
    let e_src = tape.matmul(s_src, ones_row)?; // [i, j] = s_src[i]
    let s_dst = tape.reshape(s_dst, &[b, 1, n])?;
    let ones_col = tape.constant(Tensor::ones(&[b, n, 1]));
    let e_dst = tape.matmul(ones_col, s_dst)?; // [i, j] = s_dst[j]
    let e = tape.add(e_src, e_dst)?;
    let e = tape.leaky_relu(e, LEAKY_SLOPE)?;
    tape.masked_softmax(e, &ctx.support)
}

/// Positional-encoded cross-attention from each target region's sequence to
/// each neighbor's, per category.
///
/// Returns `M̂` `[B, P, C, T, d]` over the context's pairs and the temporal
/// weights `[B, P, C, H, T, T]`.
pub fn nta_forward(
    tape: &mut Tape,
    mt: Var,
    ctx: &DsaContext,
    pe: &Tensor,
    p: &DsaVars,
    heads: usize,
) -> Result<(Var, Var)> {
    let [_, n, t, _, d] = feature_dims(tape, mt)?;
    check_heads(d, heads)?;
    if pe.shape() != [t, d] {
        return Err(StsError::Dimension(format!(
            "positional encoding {:?} does not match T={t}, d={d}",
            pe.shape()
        )));
    }
    if n != ctx.n_regions || ctx.n_pairs() == 0 {
        return Err(StsError::Dimension(format!(
            "neighbor attention needs a non-empty neighborhood over {n} regions"
        )));
    }
    let x = tape.permute(mt, &[0, 1, 3, 2, 4])?; // [B,N,C,T,d]
    let pe = tape.constant(pe.clone());
    let x = tape.add(x, pe)?;
    let q = project_heads(tape, x, p.wq, heads)?; // [B,N,C,H,T,dh]
    let k = project_heads(tape, x, p.wk, heads)?;
    let v = project_heads(tape, x, p.wv, heads)?;
    let q = tape.index_select(q, 1, &ctx.targets)?;
    let k = tape.index_select(k, 1, &ctx.neighbors)?;
    let v = tape.index_select(v, 1, &ctx.neighbors)?;
    let (o, alpha) = attend(tape, q, k, v)?;
    let mhat = merge_heads(tape, o, p.wo)?;
    Ok((mhat, alpha))
}

fn activate(tape: &mut Tape, x: Var, act: DsaActivation) -> Result<Var> {
    match act {
        DsaActivation::Sigmoid => tape.sigmoid(x),
        DsaActivation::Tanh => tape.tanh(x),
        DsaActivation::Identity => Ok(x),
    }
}

/// Output of [`dsa_forward`].
#[derive(Clone, Copy, Debug)]
pub struct DsaOutput {
    pub out: Var,
    pub spatial: Var,
    pub temporal: Option<Var>,
}

/// `E[i] = act(Σ_{k ∈ 𝒩⁺(i)} α̃_ik · M̂_ik)`.
pub fn dsa_forward(
    tape: &mut Tape,
    mt: Var,
    ctx: &DsaContext,
    pe: &Tensor,
    p: &DsaVars,
    heads: usize,
    act: DsaActivation,
) -> Result<DsaOutput> {
    let [b, n, t, c, d] = feature_dims(tape, mt)?;
    let spatial = gat_weights(tape, mt, ctx, p)?;
    let (Some(gather), Some(owner)) = (&ctx.gather, &ctx.owner) else {
        // No region has any support: every aggregate is empty.
        let zero = tape.constant(Tensor::zeros(&[b, n, t, c, d]));
        let out = activate(tape, zero, act)?;
        return Ok(DsaOutput {
            out,
            spatial,
            temporal: None,
        });
    };
    let (mhat, temporal) = nta_forward(tape, mt, ctx, pe, p, heads)?;
    let pairs = ctx.n_pairs();
    let gather = tape.constant(gather.clone());
    let owner = tape.constant(owner.clone());
    let w = tape.matmul(spatial, gather)?; // [B,N,P]: α̃[i, nbr(p)]
    let w = tape.mul(w, owner)?; // zero unless target(p) = i
    let flat = tape.reshape(mhat, &[b, pairs, c * t * d])?;
    let agg = tape.matmul(w, flat)?;
    let agg = tape.reshape(agg, &[b, n, c, t, d])?;
    let agg = tape.permute(agg, &[0, 1, 3, 2, 4])?;
    let out = activate(tape, agg, act)?;
    Ok(DsaOutput {
        out,
        spatial,
        temporal: Some(temporal),
    })
}

/// Attention weights recorded by one layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct LayerTrace {
    pub semantic: Option<Var>,
    pub spatial: Option<Var>,
    pub temporal: Option<Var>,
}

/// One STC layer, skipping any component whose params are absent.
pub fn stc_layer(
    tape: &mut Tape,
    e: Var,
    ctx: &DsaContext,
    pe: &Tensor,
    p: &LayerVars,
    cfg: &StcConfig,
) -> Result<(Var, LayerTrace)> {
    let mut trace = LayerTrace::default();
    let mut x = e;
    if let Some(msa) = &p.msa {
        let (m, alpha) = msa_forward(tape, x, msa, cfg.heads)?;
        trace.semantic = Some(alpha);
        x = m;
    }
    if let Some(trr) = &p.trr {
        x = trr_forward(tape, x, trr)?;
    }
    if let Some(dsa) = &p.dsa {
        let out = dsa_forward(tape, x, ctx, pe, dsa, cfg.heads, cfg.dsa_activation)?;
        trace.spatial = Some(out.spatial);
        trace.temporal = out.temporal;
        x = out.out;
    }
    Ok((x, trace))
}

/// Runs `layers.len()` layers and returns `[E⁽⁰⁾, …, E⁽ᴸ⁾]` with per-layer
/// traces.
pub fn stc_stack(
    tape: &mut Tape,
    e0: Var,
    ctx: &DsaContext,
    pe: &Tensor,
    layers: &[LayerVars],
    cfg: &StcConfig,
) -> Result<(Vec<Var>, Vec<LayerTrace>)> {
    if layers.is_empty() {
        return Err(StsError::Config("at least one STC layer is required".into()));
    }
    let mut outs = vec![e0];
    let mut traces = Vec::with_capacity(layers.len());
    for lv in layers {
        let prev = *outs.last().expect("non-empty");
        let (next, tr) = stc_layer(tape, prev, ctx, pe, lv, cfg)?;
        outs.push(next);
        traces.push(tr);
    }
    Ok((outs, traces))
}
