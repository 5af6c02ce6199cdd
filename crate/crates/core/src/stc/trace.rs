use std::collections::BTreeMap;
use std::io::Write;

use super::{DsaContext, LayerTrace};
use crate::error::{Result, StsError};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttentionKind {
    Semantic,
    Spatial,
    Temporal,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::Semantic => "semantic",
            AttentionKind::Spatial => "spatial",
            AttentionKind::Temporal => "temporal",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = StsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(AttentionKind::Semantic),
            "spatial" => Ok(AttentionKind::Spatial),
            "temporal" => Ok(AttentionKind::Temporal),
            other => Err(StsError::Data(format!("unknown attention kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub layer: usize,
    pub kind: AttentionKind,
    pub head: usize,
    pub query_index: usize,
    pub key_index: usize,
    pub weight: f64,
}

/// Flattened attention weights of one sample.
///
/// Query indices are flattened so every (layer, kind, head, query) group is
/// one softmax row:
/// * semantic: `(region · T + slot) · C + query_category`, key = category;
/// * spatial: query = target region, key = region in its support (head 0);
/// * temporal: `((target · N + neighbor) · C + category) · T + slot`,
///   key = slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "layer,kind,head,query_index,key_index,weight";

impl AttentionTrace {
    /// Extracts batch element `sample` from recorded layer traces.
    pub fn from_layers(
        tape: &Tape,
        layers: &[LayerTrace],
        ctx: &DsaContext,
        sample: usize,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        let n = ctx.n_regions;
        for (l, tr) in layers.iter().enumerate() {
            if let Some(v) = tr.semantic {
                // [B, N, T, H, C, C]
                let t = tape.value(v);
                let s = t.shape();
                let (nn, tt, hh, cc) = (s[1], s[2], s[3], s[4]);
                let per_sample = nn * tt * hh * cc * cc;
                let data = &t.data()[sample * per_sample..(sample + 1) * per_sample];
                for r in 0..nn {
                    for slot in 0..tt {
                        for h in 0..hh {
                            for q in 0..cc {
                                for k in 0..cc {
                                    let w = data[(((r * tt + slot) * hh + h) * cc + q) * cc + k];
                                    rows.push(TraceRow {
                                        layer: l,
                                        kind: AttentionKind::Semantic,
                                        head: h,
                                        query_index: (r * tt + slot) * cc + q,
                                        key_index: k,
                                        weight: w,
                                    });
                                }
                            }
                        }
                    }
                }
            }
            if let Some(v) = tr.spatial {
                let t = tape.value(v);
                let data = &t.data()[sample * n * n..(sample + 1) * n * n];
                for i in 0..n {
                    for j in 0..n {
                        if ctx.support[i * n + j] {
                            rows.push(TraceRow {
                                layer: l,
                                kind: AttentionKind::Spatial,
                                head: 0,
                                query_index: i,
                                key_index: j,
                                weight: data[i * n + j],
                            });
                        }
                    }
                }
            }
            if let Some(v) = tr.temporal {
                // [B, P, C, H, T, T]
                let t = tape.value(v);
                let s = t.shape();
                let (pp, cc, hh, tt) = (s[1], s[2], s[3], s[4]);
                let per_sample = pp * cc * hh * tt * tt;
                let data = &t.data()[sample * per_sample..(sample + 1) * per_sample];
                for p in 0..pp {
                    let pair = ctx.targets[p] * n + ctx.neighbors[p];
                    for c in 0..cc {
                        for h in 0..hh {
                            for q in 0..tt {
                                for k in 0..tt {
                                    rows.push(TraceRow {
                                        layer: l,
                                        kind: AttentionKind::Temporal,
                                        head: h,
                                        query_index: (pair * cc + c) * tt + q,
                                        key_index: k,
                                        weight: data[(((p * cc + c) * hh + h) * tt + q) * tt + k],
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(AttentionTrace { rows })
    }

    /// Writes the CSV form. Weights use the shortest round-trip decimal.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.layer,
                r.kind.as_str(),
                r.head,
                r.query_index,
                r.key_index,
                r.weight
            )?;
        }
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| StsError::Data(format!("attention csv: {e}")))?
            .iter()
            .collect::<Vec<_>>()
            .join(",");
        if header != TRACE_HEADER {
            return Err(StsError::Data(format!(
                "attention csv header '{header}' (expected '{TRACE_HEADER}')"
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| StsError::Data(format!("attention csv line {line}: {e}")))?;
            let field = |k: usize| -> Result<&str> {
                rec.get(k)
                    .ok_or_else(|| StsError::Data(format!("attention csv line {line}: missing field")))
            };
            let int = |k: usize| -> Result<usize> {
                field(k)?
                    .parse()
                    .map_err(|_| StsError::Data(format!("attention csv line {line}: bad integer")))
            };
            rows.push(TraceRow {
                layer: int(0)?,
                kind: field(1)?.parse()?,
                head: int(2)?,
                query_index: int(3)?,
                key_index: int(4)?,
                weight: field(5)?
                    .parse()
                    .map_err(|_| StsError::Data(format!("attention csv line {line}: bad weight")))?,
            });
        }
        Ok(AttentionTrace { rows })
    }

    /// Sum of weights per (layer, kind, head, query) row.
    pub fn row_sums(&self) -> BTreeMap<(usize, AttentionKind, usize, usize), f64> {
        let mut sums = BTreeMap::new();
        for r in &self.rows {
            *sums
                .entry((r.layer, r.kind, r.head, r.query_index))
                .or_insert(0.0) += r.weight;
        }
        sums
    }
}
