//! Zero-inflated multi-task prediction: an exposure (occurs / does not
//! occur) classifier gates a count regressor, trained with a
//! magnitude-bucketed squared error plus a cross-entropy auxiliary loss.

use crate::error::{Result, StsError};
use crate::tensor::{Tape, Tensor, Var};

/// Default bucket weights for index values {0, 1, 2, ≥3}.
pub const DEFAULT_ETA: [f64; 4] = [0.05, 0.2, 0.25, 0.5];

/// Smallest argument passed to `log` in the cross-entropy.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub eta: [f64; 4],
    pub lambda_c: f64,
    pub lambda_reg: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eta: DEFAULT_ETA,
            lambda_c: 0.01,
            lambda_reg: 0.0001,
            tau: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta.iter().any(|&e| e < 0.0 || !e.is_finite()) {
            return Err(StsError::Config(format!("eta weights must be ≥ 0, got {:?}", self.eta)));
        }
        if !(self.lambda_c >= 0.0 && self.lambda_reg >= 0.0) {
            return Err(StsError::Config("lambda_c and lambda_reg must be ≥ 0".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(StsError::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// Bucket index for an index value: 0, 1, 2, or 3 for anything ≥ 3.
/// Fractional values are floored for bucket selection only.
pub fn bucket_of(x: f64) -> usize {
    if x >= 3.0 {
        3
    } else if x >= 0.0 {
        x.floor() as usize
    } else {
        0
    }
}

/// Averages the layer outputs `[E⁽⁰⁾…E⁽ᴸ⁾]` (each `[B,N,T,C,d]`) and sums the
/// result over the slot axis, giving `[B,N,C,d]`.
pub fn fuse_embeddings(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    let (&first, rest) = layers
        .split_first()
        .ok_or_else(|| StsError::Contract("cannot fuse an empty layer sequence".into()))?;
    let shape = tape.shape(first).to_vec();
    if shape.len() != 5 {
        return Err(StsError::Dimension(format!(
            "layer outputs must be [B,N,T,C,d], got {shape:?}"
        )));
    }
    let mut acc = first;
    for &l in rest {
        if tape.shape(l) != shape.as_slice() {
            return Err(StsError::Dimension(format!(
                "layer output shape {:?} differs from {shape:?}",
                tape.shape(l)
            )));
        }
        acc = tape.add(acc, l)?;
    }
    let avg = tape.scale(acc, 1.0 / layers.len() as f64)?;
    tape.sum(avg, 2)
}

/// Per-category dot product of `[B,N,C,d]` features with `[C,d]` weights.
fn category_dot(tape: &mut Tape, e: Var, w: Var) -> Result<Var> {
    let (se, sw) = (tape.shape(e), tape.shape(w));
    if se.len() != 4 || sw.len() != 2 || se[2..] != *sw {
        return Err(StsError::Dimension(format!(
            "head weights {sw:?} do not match fused features {se:?}"
        )));
    }
    let prod = tape.mul(e, w)?;
    tape.sum(prod, 3)
}

/// Exposure probabilities `σ(w_cᵀ e_c)`, shape `[B,N,C]`.
pub fn exposure_head(tape: &mut Tape, e: Var, w: Var) -> Result<Var> {
    let logits = category_dot(tape, e, w)?;
    tape.sigmoid(logits)
}

/// `z = 1` iff `p ≥ τ`.
pub fn threshold_mask(p: &Tensor, tau: f64) -> Vec<bool> {
    p.data().iter().map(|&v| v >= tau).collect()
}

/// Masked count prediction `(w_cᵀ e_c) · z`, exactly `0.0` where `z = 0`.
pub fn count_head(tape: &mut Tape, e: Var, z: &[bool], w: Var) -> Result<Var> {
    let raw = category_dot(tape, e, w)?;
    tape.mask_fill(raw, z)
}

/// Unmasked linear read-out used when the multi-task head is ablated.
pub fn linear_head(tape: &mut Tape, e: Var, w: Var) -> Result<Var> {
    category_dot(tape, e, w)
}

/// Binary cross-entropy of exposure probabilities against `x_true > 0`,
/// summed over every element.
pub fn classification_loss(tape: &mut Tape, x_true: &Tensor, p: Var) -> Result<Var> {
    if x_true.shape() != tape.shape(p) {
        return Err(StsError::Dimension(format!(
            "truth {:?} and probabilities {:?} differ",
            x_true.shape(),
            tape.shape(p)
        )));
    }
    let pos = x_true.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let neg = pos.map(|v| 1.0 - v);
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);
    let p_safe = tape.clamp_min(p, LOG_FLOOR)?;
    let log_p = tape.log(p_safe)?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let q_safe = tape.clamp_min(q, LOG_FLOOR)?;
    let log_q = tape.log(q_safe)?;
    let a = tape.mul(log_p, pos)?;
    let b = tape.mul(log_q, neg)?;
    let s = tape.add(a, b)?;
    let s = tape.sum_all(s)?;
    tape.scale(s, -1.0)
}

/// `Σ_f η_f Σ_{samples in f} (truth − x̂)²` with buckets taken from `truth`.
pub fn regression_loss(tape: &mut Tape, truth: &Tensor, x_hat: Var, eta: &[f64; 4]) -> Result<Var> {
    let buckets: Vec<usize> = truth.data().iter().map(|&v| bucket_of(v)).collect();
    regression_loss_bucketed(tape, truth, &buckets, x_hat, eta)
}

/// As [`regression_loss`] but with buckets supplied separately, for targets
/// that live on a rescaled axis while buckets follow raw index values.
pub fn regression_loss_bucketed(
    tape: &mut Tape,
    truth: &Tensor,
    buckets: &[usize],
    x_hat: Var,
    eta: &[f64; 4],
) -> Result<Var> {
    if truth.shape() != tape.shape(x_hat) || buckets.len() != truth.len() {
        return Err(StsError::Dimension(format!(
            "truth {:?}, predictions {:?} and {} buckets disagree",
            truth.shape(),
            tape.shape(x_hat),
            buckets.len()
        )));
    }
    let weights = Tensor::new(
        truth.shape().to_vec(),
        buckets.iter().map(|&b| eta[b.min(3)]).collect(),
    )?;
    let truth = tape.constant(truth.clone());
    let w = tape.constant(weights);
    let diff = tape.sub(truth, x_hat)?;
    let sq = tape.square(diff)?;
    let weighted = tape.mul(sq, w)?;
    tape.sum_all(weighted)
}

/// `Σ ‖θ‖²` over the given parameter vars.
pub fn l2_penalty(tape: &mut Tape, params: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(params.len());
    for &p in params {
        let sq = tape.square(p)?;
        terms.push(tape.sum_all(sq)?);
    }
    let Some(&first) = terms.first() else {
        let zero = tape.constant(Tensor::zeros(&[1]));
        return tape.sum_all(zero);
    };
    let mut acc = first;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `L_r + λ_c L_c + λ_reg Σ‖θ‖²`. `l_c` is absent for the single-task
/// ablation.
pub fn total_loss(
    tape: &mut Tape,
    l_r: Var,
    l_c: Option<Var>,
    params: &[Var],
    cfg: &LossConfig,
) -> Result<Var> {
    let mut loss = l_r;
    if let Some(l_c) = l_c {
        let t = tape.scale(l_c, cfg.lambda_c)?;
        loss = tape.add(loss, t)?;
    }
    if cfg.lambda_reg != 0.0 && !params.is_empty() {
        let reg = l2_penalty(tape, params)?;
        let reg = tape.scale(reg, cfg.lambda_reg)?;
        loss = tape.add(loss, reg)?;
    }
    Ok(loss)
}
