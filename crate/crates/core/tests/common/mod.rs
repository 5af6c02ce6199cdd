//! Straight-loop reference implementations used as test oracles.

#![allow(dead_code)]

use sts_core::tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// `W[h]·x` for stacked weights `[H, dh, d]`.
fn head_proj(w: &Tensor, h: usize, x: &[f64]) -> Vec<f64> {
    let (dh, d) = (w.shape()[1], w.shape()[2]);
    (0..dh).map(|j| (0..d).map(|k| w.get(&[h, j, k]) * x[k]).sum()).collect()
}

/// `W·x` for a 2-D matrix.
fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    (0..r).map(|i| (0..c).map(|k| w.get(&[i, k]) * x[k]).sum()).collect()
}

fn vec5(t: &Tensor, b: usize, n: usize, s: usize, c: usize) -> Vec<f64> {
    let d = t.shape()[4];
    (0..d).map(|k| t.get(&[b, n, s, c, k])).collect()
}

/// Multi-head attention where query `i` attends over `keys`, followed by `W^O`.
fn attention(wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, queries: &[Vec<f64>], keys: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let heads = wq.shape()[0];
    let dh = wq.shape()[1];
    let mut concat = vec![Vec::new(); queries.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let ks: Vec<Vec<f64>> = keys.iter().map(|k| head_proj(wk, h, k)).collect();
        let vs: Vec<Vec<f64>> = keys.iter().map(|k| head_proj(wv, h, k)).collect();
        let mut wh = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            let q = head_proj(wq, h, q);
            let scores: Vec<f64> = ks
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax(&scores);
            for j in 0..dh {
                concat[qi].push(a.iter().zip(&vs).map(|(w, v)| w * v[j]).sum());
            }
            wh.push(a);
        }
        weights.push(wh);
    }
    (concat.iter().map(|x| mat_vec(wo, x)).collect(), weights)
}

/// Semantic attention across categories. Returns `M` `[B,N,T,C,d]` and
/// weights `[B,N,T,H,C,C]`.
pub fn msa(e: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> (Tensor, Tensor) {
    let s = e.shape().to_vec();
    let (b, n, t, c, d) = (s[0], s[1], s[2], s[3], s[4]);
    let heads = wq.shape()[0];
    let mut out = vec![0.0; b * n * t * c * d];
    let mut alpha = vec![0.0; b * n * t * heads * c * c];
    for bi in 0..b {
        for ni in 0..n {
            for ti in 0..t {
                let xs: Vec<Vec<f64>> = (0..c).map(|ci| vec5(e, bi, ni, ti, ci)).collect();
                let (m, w) = attention(wq, wk, wv, wo, &xs, &xs);
                for ci in 0..c {
                    for k in 0..d {
                        out[(((bi * n + ni) * t + ti) * c + ci) * d + k] = m[ci][k];
                    }
                }
                for h in 0..heads {
                    for ci in 0..c {
                        for cj in 0..c {
                            alpha[((((bi * n + ni) * t + ti) * heads + h) * c + ci) * c + cj] = w[h][ci][cj];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(s.clone(), out).unwrap(),
        Tensor::new(vec![b, n, t, heads, c, c], alpha).unwrap(),
    )
}

/// GRU recurrence over slots with a sigmoid read-out.
pub fn trr(m: &Tensor, wr: &Tensor, wz: &Tensor, wh: &Tensor, wo: &Tensor) -> Tensor {
    let s = m.shape().to_vec();
    let (b, n, t, c, d) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = vec![0.0; m.len()];
    for bi in 0..b {
        for ni in 0..n {
            for ci in 0..c {
                let mut h = vec![0.0; d];
                for ti in 0..t {
                    let x = vec5(m, bi, ni, ti, ci);
                    let hx: Vec<f64> = h.iter().chain(&x).copied().collect();
                    let r: Vec<f64> = mat_vec(wr, &hx).into_iter().map(sigmoid).collect();
                    let z: Vec<f64> = mat_vec(wz, &hx).into_iter().map(sigmoid).collect();
                    let rhx: Vec<f64> = (0..d).map(|k| r[k] * h[k]).chain(x.iter().copied()).collect();
                    let cand: Vec<f64> = mat_vec(wh, &rhx).into_iter().map(f64::tanh).collect();
                    for k in 0..d {
                        h[k] = (1.0 - z[k]) * h[k] + z[k] * cand[k];
                    }
                    let o = mat_vec(wo, &h);
                    for k in 0..d {
                        out[(((bi * n + ni) * t + ti) * c + ci) * d + k] = sigmoid(o[k]);
                    }
                }
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Graph-attention weights `[B,N,N]` over `support` (row-major N×N).
pub fn gat(mt: &Tensor, w: &Tensor, a: &Tensor, support: &[bool]) -> Tensor {
    let s = mt.shape().to_vec();
    let (b, n, t, c, d) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = vec![0.0; b * n * n];
    for bi in 0..b {
        let wf: Vec<Vec<f64>> = (0..n)
            .map(|ni| {
                let mut f = vec![0.0; d];
                for ti in 0..t {
                    for ci in 0..c {
                        for k in 0..d {
                            f[k] += mt.get(&[bi, ni, ti, ci, k]) / (t * c) as f64;
                        }
                    }
                }
                mat_vec(w, &f)
            })
            .collect();
        for i in 0..n {
            let cols: Vec<usize> = (0..n).filter(|&j| support[i * n + j]).collect();
            let scores: Vec<f64> = cols
                .iter()
                .map(|&j| {
                    let mut e = 0.0;
                    for k in 0..d {
                        e += a.data()[k] * wf[i][k] + a.data()[d + k] * wf[j][k];
                    }
                    if e > 0.0 { e } else { 0.2 * e }
                })
                .collect();
            if cols.is_empty() {
                continue;
            }
            for (&j, v) in cols.iter().zip(softmax(&scores)) {
                out[(bi * n + i) * n + j] = v;
            }
        }
    }
    Tensor::new(vec![b, n, n], out).unwrap()
}

/// Neighbor temporal attention for the given (target, neighbor) pairs.
/// Returns `[B,P,C,T,d]` and weights `[B,P,C,H,T,T]`.
#[allow(clippy::too_many_arguments)]
pub fn nta(mt: &Tensor, pe: &Tensor, pairs: &[(usize, usize)], wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> (Tensor, Tensor) {
    let s = mt.shape().to_vec();
    let (b, t, c, d) = (s[0], s[2], s[3], s[4]);
    let heads = wq.shape()[0];
    let p = pairs.len();
    let mut out = vec![0.0; b * p * c * t * d];
    let mut alpha = vec![0.0; b * p * c * heads * t * t];
    for bi in 0..b {
        for (pi, &(i, j)) in pairs.iter().enumerate() {
            for ci in 0..c {
                let seq = |r: usize| -> Vec<Vec<f64>> {
                    (0..t)
                        .map(|ti| (0..d).map(|k| mt.get(&[bi, r, ti, ci, k]) + pe.get(&[ti, k])).collect())
                        .collect()
                };
                let (m, w) = attention(wq, wk, wv, wo, &seq(i), &seq(j));
                for ti in 0..t {
                    for k in 0..d {
                        out[(((bi * p + pi) * c + ci) * t + ti) * d + k] = m[ti][k];
                    }
                }
                for h in 0..heads {
                    for ti in 0..t {
                        for tj in 0..t {
                            alpha[(((((bi * p + pi) * c + ci) * heads + h) * t + ti) * t) + tj] = w[h][ti][tj];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![b, p, c, t, d], out).unwrap(),
        Tensor::new(vec![b, p, c, heads, t, t], alpha).unwrap(),
    )
}

/// Parameters of one layer, by component.
pub struct LayerParams<'a> {
    pub msa: Option<[&'a Tensor; 4]>,
    pub trr: Option<[&'a Tensor; 4]>,
    /// gat.w, gat.a, nta.wq, nta.wk, nta.wv, nta.wo
    pub dsa: Option<[&'a Tensor; 6]>,
}

impl<'a> LayerParams<'a> {
    pub fn from_store(store: &'a sts_core::ParamStore, l: usize) -> Self {
        let g = |n: &str| store.get(&format!("layer{l}.{n}"));
        let msa = g("msa.wq").map(|_| ["msa.wq", "msa.wk", "msa.wv", "msa.wo"].map(|n| g(n).unwrap()));
        let trr = g("trr.wr").map(|_| ["trr.wr", "trr.wz", "trr.wh", "trr.wo"].map(|n| g(n).unwrap()));
        let dsa = g("gat.w").map(|_| ["gat.w", "gat.a", "nta.wq", "nta.wk", "nta.wv", "nta.wo"].map(|n| g(n).unwrap()));
        LayerParams { msa, trr, dsa }
    }
}

/// One layer with a sigmoid DSA activation; `support` is row-major N×N.
pub fn layer(e: &Tensor, pe: &Tensor, support: &[bool], p: &LayerParams) -> Tensor {
    let mut x = e.clone();
    if let Some([wq, wk, wv, wo]) = p.msa {
        x = msa(&x, wq, wk, wv, wo).0;
    }
    if let Some([wr, wz, wh, wo]) = p.trr {
        x = trr(&x, wr, wz, wh, wo);
    }
    if let Some([gw, ga, wq, wk, wv, wo]) = p.dsa {
        let s = x.shape().to_vec();
        let (b, n, t, c, d) = (s[0], s[1], s[2], s[3], s[4]);
        let alpha = gat(&x, gw, ga, support);
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| support[i * n + j]).map(move |j| (i, j)))
            .collect();
        let (mhat, _) = nta(&x, pe, &pairs, wq, wk, wv, wo);
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for i in 0..n {
                for ti in 0..t {
                    for ci in 0..c {
                        for k in 0..d {
                            let mut acc = 0.0;
                            for (pi, &(ti_, j)) in pairs.iter().enumerate() {
                                if ti_ == i {
                                    acc += alpha.get(&[bi, i, j]) * mhat.get(&[bi, pi, ci, ti, k]);
                                }
                            }
                            out[(((bi * n + i) * t + ti) * c + ci) * d + k] = sigmoid(acc);
                        }
                    }
                }
            }
        }
        x = Tensor::new(s, out).unwrap();
    }
    x
}

/// `E⁽⁰⁾[b,n,t,c,:] = x̄[b,n,t,c] · e_c`.
pub fn embed(xbar: &Tensor, table: &Tensor) -> Tensor {
    let s = xbar.shape().to_vec();
    let d = table.shape()[1];
    let mut out = Vec::with_capacity(xbar.len() * d);
    for (i, &v) in xbar.data().iter().enumerate() {
        let c = i % s[3];
        for k in 0..d {
            out.push(v * table.get(&[c, k]));
        }
    }
    let mut shape = s;
    shape.push(d);
    Tensor::new(shape, out).unwrap()
}

/// Full forward pass: returns (exposure probabilities, masked predictions)
/// on `[B,N,C]`, each absent/unmasked when the head has no exposure weights.
pub fn model(inputs: &Tensor, pe: &Tensor, support: &[bool], store: &sts_core::ParamStore, layers: usize, tau: f64) -> (Option<Vec<f64>>, Vec<f64>) {
    let mut outs = vec![embed(inputs, store.get("embed.category").unwrap())];
    for l in 0..layers {
        let next = layer(outs.last().unwrap(), pe, support, &LayerParams::from_store(store, l));
        outs.push(next);
    }
    let s = outs[0].shape().to_vec();
    let (b, n, t, c, d) = (s[0], s[1], s[2], s[3], s[4]);
    let count = store.get("head.count").unwrap();
    let exposure = store.get("head.exposure");
    let mut probs = Vec::new();
    let mut preds = Vec::new();
    for bi in 0..b {
        for ni in 0..n {
            for ci in 0..c {
                let mut fused = vec![0.0; d];
                for ti in 0..t {
                    for k in 0..d {
                        let avg: f64 = outs.iter().map(|o| o.get(&[bi, ni, ti, ci, k])).sum::<f64>() / outs.len() as f64;
                        fused[k] += avg;
                    }
                }
                let dot = |w: &Tensor| (0..d).map(|k| w.get(&[ci, k]) * fused[k]).sum::<f64>();
                let raw = dot(count);
                match exposure {
                    Some(w) => {
                        let p = sigmoid(dot(w));
                        probs.push(p);
                        preds.push(if p >= tau { raw } else { 0.0 });
                    }
                    None => preds.push(raw),
                }
            }
        }
    }
    (exposure.map(|_| probs), preds)
}
