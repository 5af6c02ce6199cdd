use std::sync::Arc;

use super::kernels;
use super::value::{numel, Tensor};
use crate::error::{Result, StsError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Exp,
    Log,
    Square,
    ClampMin(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Affine { a: Var, scale: f64 },
    MatMul { a: Var, b: Var, trans_b: bool },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax { a: Var, axis: usize },
    MaskedSoftmax(Var),
    Sum { a: Var, axis: usize, mean: bool },
    SumAll(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, axis: usize, indices: Arc<[usize]> },
    MaskFill { a: Var, mask: Arc<[bool]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Tanh, _) => "tanh",
            Op::Unary(Unary::LeakyRelu(_), _) => "leaky_relu",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Log, _) => "log",
            Op::Unary(Unary::Square, _) => "square",
            Op::Unary(Unary::ClampMin(_), _) => "clamp_min",
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(_) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax(_) => "masked_softmax",
            Op::Sum { mean: false, .. } => "sum",
            Op::Sum { mean: true, .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::IndexSelect { .. } => "index_select",
            Op::MaskFill { .. } => "mask_fill",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order: every
/// op only refers to vars that already exist.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    faulty_sigmoid: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// `∂loss/∂var`; zeros for vars the loss does not depend on.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape whose sigmoid backward rule drops the `(1 − y)` factor.
    /// Exists only as a negative control for gradient checks.
    #[doc(hidden)]
    pub fn with_faulty_sigmoid_backward() -> Self {
        Tape {
            nodes: Vec::new(),
            faulty_sigmoid: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Result<Var> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(StsError::Numeric(format!(
                "{} produced non-finite value {} at flat index {pos}",
                op.name(),
                data[pos]
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Tensor::from_parts(shape, data),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- pointwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(StsError::Dimension(format!(
                "{kind:?}: shapes {sa:?} and {sb:?} are not broadcast-compatible \
                 (second operand must equal the trailing dims of the first)"
            )));
        }
        let shape = sa.to_vec();
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let nb = xb.len();
        let mut out = Vec::with_capacity(xa.len());
        for chunk in xa.chunks(nb) {
            match kind {
                Binary::Add => out.extend(chunk.iter().zip(xb).map(|(x, y)| x + y)),
                Binary::Sub => out.extend(chunk.iter().zip(xb).map(|(x, y)| x - y)),
                Binary::Mul => out.extend(chunk.iter().zip(xb).map(|(x, y)| x * y)),
            }
        }
        self.push(Op::Binary(kind, a, b), shape, out, &[a, b])
    }

    /// `a + b`; `b` may be a trailing-dims broadcast of `a` (e.g. a bias row).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let data: Vec<f64> = match kind {
            Unary::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            Unary::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
            Unary::LeakyRelu(s) => x
                .data()
                .iter()
                .map(|&v| if v >= 0.0 { v } else { s * v })
                .collect(),
            Unary::Exp => x.data().iter().map(|v| v.exp()).collect(),
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(StsError::Domain(format!("log of non-positive value {bad}")));
                }
                x.data().iter().map(|v| v.ln()).collect()
            }
            Unary::Square => x.data().iter().map(|v| v * v).collect(),
            Unary::ClampMin(m) => x.data().iter().map(|&v| v.max(m)).collect(),
        };
        self.push(Op::Unary(kind, a), shape, data, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    /// Natural log; any non-positive input is a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    /// `max(a, min)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        self.unary(Unary::ClampMin(min), a)
    }

    /// Dispatches one of the [`Elementwise`] kinds. Binary kinds take two
    /// operands, the rest one.
    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(StsError::Argument(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        let a = operands[0];
        match kind {
            Elementwise::Add => self.add(a, operands[1]),
            Elementwise::Sub => self.sub(a, operands[1]),
            Elementwise::Mul => self.mul(a, operands[1]),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Tanh => self.tanh(a),
            Elementwise::LeakyRelu(s) => self.leaky_relu(a, s),
            Elementwise::Exp => self.exp(a),
            Elementwise::Log => self.log(a),
            Elementwise::Square => self.square(a),
        }
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|v| scale * v + shift).collect();
        self.push(Op::Affine { a, scale }, shape, data, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// Keeps entries where `mask` is true and writes an exact `0.0`
    /// elsewhere. The mask is a constant; no gradient flows through it.
    pub fn mask_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(StsError::Dimension(format!(
                "mask of length {} for tensor of shape {:?}",
                mask.len(),
                x.shape()
            )));
        }
        let shape = x.shape().to_vec();
        let data = x
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        self.push(
            Op::MaskFill {
                a,
                mask: mask.into(),
            },
            shape,
            data,
            &[a],
        )
    }

    // ---- linear algebra --------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || {
            StsError::Dimension(format!(
                "matmul{}: incompatible shapes {sa:?} and {sb:?}",
                if trans_b { " (b transposed)" } else { "" }
            ))
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(err());
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let rows = xa.len() / k;
        let mut out = vec![0.0; rows * n];
        if sb.len() == 2 {
            if trans_b {
                kernels::gemm_nt(xa, xb, &mut out, rows, k, n);
            } else {
                kernels::gemm_nn(xa, xb, &mut out, rows, k, n);
            }
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batches = numel(&sa[..sa.len() - 2]);
            for bi in 0..batches {
                let asl = &xa[bi * m * k..(bi + 1) * m * k];
                let bsl = &xb[bi * k * n..(bi + 1) * k * n];
                let osl = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::gemm_nt(asl, bsl, osl, m, k, n);
                } else {
                    kernels::gemm_nn(asl, bsl, osl, m, k, n);
                }
            }
        }
        self.push(Op::MatMul { a, b, trans_b }, shape, out, &[a, b])
    }

    /// Matrix product over the last two axes.
    ///
    /// A rank-2 `b` is shared across every leading index of `a`; otherwise
    /// `a` and `b` must have identical leading (batch) dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes, with the same batching rules as
    /// [`Tape::matmul`]. Applying a weight `W` (out×in) to row vectors is
    /// `matmul_nt(x, W)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    // ---- shape -----------------------------------------------------------

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(StsError::Dimension(format!(
                "invalid permutation {perm:?} for shape {shape:?}"
            )));
        }
        let (data, out_shape) = kernels::permute(self.value(a).data(), shape, perm);
        self.push(
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            out_shape,
            data,
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let data = t.into_data();
        self.push(Op::Reshape(a), shape.to_vec(), data, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| StsError::Argument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(StsError::Dimension(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(StsError::Dimension(format!(
                    "concat along axis {axis}: shape {s:?} does not match {base:?} off-axis"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
            data,
            parts,
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(StsError::Dimension(format!(
                "narrow(axis {axis}, {start}..{}) out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, extent, inner) = kernels::split_axis(&shape, axis);
        let data = kernels::narrow(self.value(a).data(), outer, extent, inner, start, len);
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Op::Narrow { a, axis, start }, out_shape, data, &[a])
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        if self.shape(a).get(axis) != Some(&start) {
            return Err(StsError::Dimension(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {:?}",
                self.shape(a)
            )));
        }
        Ok(out)
    }

    /// Gathers slices along `axis`; indices may repeat.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(StsError::Dimension(format!(
                "index_select on axis {axis} of {shape:?} with invalid indices"
            )));
        }
        let (outer, extent, inner) = kernels::split_axis(&shape, axis);
        let data = kernels::index_select(self.value(a).data(), outer, extent, inner, indices);
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        self.push(
            Op::IndexSelect {
                a,
                axis,
                indices: indices.into(),
            },
            out_shape,
            data,
            &[a],
        )
    }

    // ---- softmax & reductions -------------------------------------------

    /// Softmax along `axis`, computed with the max subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(StsError::Dimension(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let data = kernels::softmax_axis(self.value(a).data(), outer, len, inner);
        self.push(Op::Softmax { a, axis }, shape, data, &[a])
    }

    /// Softmax over the last axis restricted to the support `mask`, whose
    /// length must equal the product of some trailing dims of `a` and is
    /// broadcast over the rest. Off-support weights are exactly zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| StsError::Dimension("masked_softmax on rank-0 tensor".into()))?;
        let total = numel(&shape);
        if mask.is_empty() || mask.len() % last != 0 || total % mask.len() != 0 {
            return Err(StsError::Dimension(format!(
                "mask of length {} does not tile shape {shape:?}",
                mask.len()
            )));
        }
        let data = kernels::masked_softmax_last(self.value(a).data(), last, mask);
        self.push(Op::MaskedSoftmax(a), shape, data, &[a])
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(StsError::Dimension(format!(
                "reduce axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let mut data = kernels::sum_axis(self.value(a).data(), outer, len, inner);
        if mean {
            let inv = len as f64;
            data.iter_mut().for_each(|v| *v /= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(Op::Sum { a, axis, mean }, out_shape, data, &[a])
    }

    /// Sum along `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), vec![], vec![s], &[a])
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every node at or before `loss`
    /// is visited once, in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(StsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let nb = xb.len();
                if self.wants(*a) {
                    let ga = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g
                            .chunks(nb)
                            .flat_map(|gc| gc.iter().zip(xb).map(|(g, y)| g * y))
                            .collect(),
                    };
                    accumulate(&mut grads[a.0], ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; nb];
                    for (gc, ac) in g.chunks(nb).zip(xa.chunks(nb)) {
                        for ((d, &gv), &av) in gb.iter_mut().zip(gc).zip(ac) {
                            *d += match kind {
                                Binary::Add => gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * av,
                            };
                        }
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = match *kind {
                    Unary::Sigmoid if self.faulty_sigmoid => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::LeakyRelu(s) => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= 0.0 { *g } else { s * g })
                        .collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                    Unary::ClampMin(m) => g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > m { *g } else { 0.0 })
                        .collect(),
                };
                accumulate(&mut grads[a.0], ga);
            }
            Op::Affine { a, scale } => {
                accumulate(&mut grads[a.0], g.iter().map(|g| g * scale).collect());
            }
            Op::MaskFill { a, mask } => {
                let ga = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(&g, &m)| if m { g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, g, grads),
            Op::Permute { a, perm } => {
                let inv = kernels::inverse_perm(perm);
                let (ga, _) = kernels::permute(g, node.value.shape(), &inv);
                accumulate(&mut grads[a.0], ga);
            }
            Op::Reshape(a) => accumulate(&mut grads[a.0], g.to_vec()),
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                let ga = kernels::softmax_axis_backward(y, g, outer, len, inner);
                accumulate(&mut grads[a.0], ga);
            }
            Op::MaskedSoftmax(a) => {
                // Off-support outputs are zero, so the plain softmax rule
                // already yields zero gradient there.
                let shape = node.value.shape();
                let last = shape[shape.len() - 1];
                let ga = kernels::softmax_axis_backward(y, g, y.len() / last, last, 1);
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sum { a, axis, mean } => {
                let (outer, len, inner) = kernels::split_axis(self.shape(*a), *axis);
                let scale = if *mean { 1.0 / len as f64 } else { 1.0 };
                accumulate(
                    &mut grads[a.0],
                    kernels::spread_axis(g, outer, len, inner, scale),
                );
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, extent, inner) = kernels::split_axis(shape, *axis);
                let mut start = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let gp = kernels::narrow(g, outer, extent, inner, start, len);
                        accumulate(&mut grads[p.0], gp);
                    }
                    start += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let (outer, extent, inner) = kernels::split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let mut ga = vec![0.0; outer * extent * inner];
                kernels::narrow_backward_into(&mut ga, g, outer, extent, inner, *start, len);
                accumulate(&mut grads[a.0], ga);
            }
            Op::IndexSelect { a, axis, indices } => {
                let (outer, extent, inner) = kernels::split_axis(self.shape(*a), *axis);
                let ga = kernels::index_select_backward(g, outer, extent, inner, indices);
                accumulate(&mut grads[a.0], ga);
            }
        }
    }

    fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        trans_b: bool,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let k = sa[sa.len() - 1];
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        // (batches, rows per batch) for the a/g side
        let (batches, m) = if sb.len() == 2 {
            (1, xa.len() / k)
        } else {
            (numel(&sa[..sa.len() - 2]), sa[sa.len() - 2])
        };
        if self.wants(a) {
            let mut ga = vec![0.0; xa.len()];
            for bi in 0..batches {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let bs = &xb[bi * k * n..(bi + 1) * k * n];
                let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                if trans_b {
                    kernels::gemm_nn(gs, bs, out, m, n, k);
                } else {
                    kernels::gemm_nt(gs, bs, out, m, n, k);
                }
            }
            accumulate(&mut grads[a.0], ga);
        }
        if self.wants(b) {
            let mut gb = vec![0.0; xb.len()];
            for bi in 0..batches {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                let as_ = &xa[bi * m * k..(bi + 1) * m * k];
                let out = &mut gb[if sb.len() == 2 { 0..k * n } else { bi * k * n..(bi + 1) * k * n }];
                if trans_b {
                    kernels::gemm_tn(gs, as_, out, m, n, k);
                } else {
                    kernels::gemm_tn(as_, gs, out, m, k, n);
                }
            }
            accumulate(&mut grads[b.0], gb);
        }
    }
}
