//! Raw slice kernels shared by the forward ops and their gradient rules.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible.

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Generic axis permutation: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    // Innermost output axis is walked with a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner_len {
            out.push(data[off]);
            off += inner_stride;
        }
        // advance the outer counter
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Numerically stable softmax along the middle axis of (outer, len, inner).
pub(crate) fn softmax_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for a in 0..len {
                mx = mx.max(x[base + a * inner]);
            }
            let mut s = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                s += e;
            }
            for a in 0..len {
                out[base + a * inner] /= s;
            }
        }
    }
    out
}

/// Softmax over the last axis restricted to `mask` (broadcast over leading
/// rows). Masked-out entries are exactly zero; an empty row stays all zero.
pub(crate) fn masked_softmax_last(x: &[f64], len: usize, mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mrows = mask.len() / len;
    for (r, (xr, orow)) in x.chunks(len).zip(out.chunks_mut(len)).enumerate() {
        let mrow = &mask[(r % mrows) * len..(r % mrows + 1) * len];
        let mut mx = f64::NEG_INFINITY;
        for (&v, &m) in xr.iter().zip(mrow) {
            if m {
                mx = mx.max(v);
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut s = 0.0;
        for ((o, &v), &m) in orow.iter_mut().zip(xr).zip(mrow) {
            if m {
                *o = (v - mx).exp();
                s += *o;
            }
        }
        for (o, &m) in orow.iter_mut().zip(mrow) {
            if m {
                *o /= s;
            }
        }
    }
    out
}

/// Backward of softmax along an axis: `gx = y ⊙ (g − Σ g⊙y)`.
pub(crate) fn softmax_axis_backward(
    y: &[f64],
    g: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for a in 0..len {
                let k = base + a * inner;
                dot += g[k] * y[k];
            }
            for a in 0..len {
                let k = base + a * inner;
                gx[k] = y[k] * (g[k] - dot);
            }
        }
    }
    gx
}

pub(crate) fn sum_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let orow = &mut out[o * inner..(o + 1) * inner];
        for a in 0..len {
            let base = (o * len + a) * inner;
            for (dst, &v) in orow.iter_mut().zip(&x[base..base + inner]) {
                *dst += v;
            }
        }
    }
    out
}

/// Inverse of [`sum_axis`]'s shape change: copies each reduced value back
/// over the axis, scaled by `scale`.
pub(crate) fn spread_axis(g: &[f64], outer: usize, len: usize, inner: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let grow = &g[o * inner..(o + 1) * inner];
        for a in 0..len {
            let base = (o * len + a) * inner;
            for (dst, &v) in out[base..base + inner].iter_mut().zip(grow) {
                *dst = v * scale;
            }
        }
    }
    out
}

/// Copies `[start, start+len)` along the axis out of (outer, extent, inner).
pub(crate) fn narrow(
    x: &[f64],
    outer: usize,
    extent: usize,
    inner: usize,
    start: usize,
    len: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

/// Adds `g` (shape outer×len×inner) into the window `[start, start+len)` of
/// `dst` (shape outer×extent×inner).
pub(crate) fn narrow_backward_into(
    dst: &mut [f64],
    g: &[f64],
    outer: usize,
    extent: usize,
    inner: usize,
    start: usize,
    len: usize,
) {
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        let src = &g[o * len * inner..(o + 1) * len * inner];
        for (d, &v) in dst[base..base + len * inner].iter_mut().zip(src) {
            *d += v;
        }
    }
}

pub(crate) fn index_select(
    x: &[f64],
    outer: usize,
    extent: usize,
    inner: usize,
    indices: &[usize],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &ix in indices {
            let base = (o * extent + ix) * inner;
            out.extend_from_slice(&x[base..base + inner]);
        }
    }
    out
}

pub(crate) fn index_select_backward(
    g: &[f64],
    outer: usize,
    extent: usize,
    inner: usize,
    indices: &[usize],
) -> Vec<f64> {
    let mut out = vec![0.0; outer * extent * inner];
    let k = indices.len();
    for o in 0..outer {
        for (slot, &ix) in indices.iter().enumerate() {
            let src = &g[(o * k + slot) * inner..(o * k + slot + 1) * inner];
            let base = (o * extent + ix) * inner;
            for (d, &v) in out[base..base + inner].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    out
}
