//! Versioned checkpoint container.
//!
//! ```text
//! sts-checkpoint 1
//! [meta]
//! n_regions = 16
//! categories = c0,c1
//! best_epoch = 12
//! best_val_mae = 0.4123
//! [config]
//! t_window = 30
//! ...
//! [norm]
//! kind = zscore
//! mu = ...
//! [params]
//! layer0.msa.wq = 8x2x16
//! ...
//! [data]
//! <row-major little-endian f64 payloads in manifest order>
//! ```

use std::path::Path;

use crate::config::{parse_entries, parse_floats, parse_value, render_floats, KeyValue};
use crate::error::{Result, StsError};
use crate::features::{NormKind, NormStats};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::{TrainConfig, TrainOutcome};

const MAGIC: &str = "sts-checkpoint 1";
const DATA_MARKER: &str = "[data]\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub n_regions: usize,
    pub category_names: Vec<String>,
    pub stats: NormStats,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub params: ParamStore,
}

fn bad(msg: impl Into<String>) -> StsError {
    StsError::Data(format!("checkpoint: {}", msg.into()))
}

fn opt<T: std::fmt::Debug>(v: Option<T>) -> String {
    v.map_or_else(|| "none".into(), |v| format!("{v:?}"))
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, config: &TrainConfig, category_names: Vec<String>) -> Self {
        Checkpoint {
            config: config.clone(),
            n_regions: outcome.model.config().n_regions,
            category_names,
            stats: outcome.stats.clone(),
            best_epoch: outcome.best_epoch,
            best_val_mae: outcome.best_val_mae,
            params: outcome.params.clone(),
        }
    }

    pub fn n_categories(&self) -> usize {
        self.category_names.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(n) = self
            .category_names
            .iter()
            .find(|n| n.is_empty() || n.contains([',', '\n', '\r']))
        {
            return Err(StsError::Argument(format!("category name '{n}' cannot be stored")));
        }
        let mut h = String::new();
        h.push_str(MAGIC);
        h.push_str("\n[meta]\n");
        h.push_str(&format!("n_regions = {}\n", self.n_regions));
        h.push_str(&format!("categories = {}\n", self.category_names.join(",")));
        h.push_str(&format!("best_epoch = {}\n", self.best_epoch.map_or_else(|| "none".into(), |e| e.to_string())));
        h.push_str(&format!("best_val_mae = {}\n", opt(self.best_val_mae)));
        h.push_str("[config]\n");
        h.push_str(&self.config.to_text());
        h.push_str("[norm]\n");
        h.push_str(&format!("kind = {}\n", self.stats.kind));
        h.push_str(&format!("mu = {}\n", render_floats(&self.stats.mu)));
        h.push_str(&format!("sigma = {}\n", render_floats(&self.stats.sigma)));
        h.push_str(&format!("min = {}\n", render_floats(&self.stats.min)));
        h.push_str(&format!("max = {}\n", render_floats(&self.stats.max)));
        h.push_str("[params]\n");
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            h.push_str(&format!("{name} = {}\n", dims.join("x")));
        }
        h.push_str(DATA_MARKER);
        let mut out = h.into_bytes();
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = DATA_MARKER.as_bytes();
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("missing [data] section"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[split + marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(format!("unsupported format (expected '{MAGIC}')")));
        }
        let mut sections: Vec<(&str, String)> = Vec::new();
        for line in lines {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                sections.push((name, String::new()));
            } else {
                let cur = sections.last_mut().ok_or_else(|| bad("content before first section"))?;
                cur.1.push_str(line);
                cur.1.push('\n');
            }
        }
        let section = |name: &str| -> Result<Vec<(String, String)>> {
            let text = &sections
                .iter()
                .find(|s| s.0 == name)
                .ok_or_else(|| bad(format!("missing [{name}] section")))?
                .1;
            Ok(parse_entries(text)
                .map_err(|e| bad(e.to_string()))?
                .into_iter()
                .map(|e| (e.key, e.value))
                .collect())
        };
        let lookup = |entries: &[(String, String)], key: &str| -> Result<String> {
            entries
                .iter()
                .find(|e| e.0 == key)
                .map(|e| e.1.clone())
                .ok_or_else(|| bad(format!("missing key {key}")))
        };

        let meta = section("meta")?;
        let n_regions = parse_value("n_regions", &lookup(&meta, "n_regions")?)?;
        let category_names: Vec<String> = lookup(&meta, "categories")?.split(',').map(str::to_string).collect();
        let best_epoch = match lookup(&meta, "best_epoch")?.as_str() {
            "none" => None,
            v => Some(parse_value("best_epoch", v)?),
        };
        let best_val_mae = match lookup(&meta, "best_val_mae")?.as_str() {
            "none" => None,
            v => Some(parse_value("best_val_mae", v)?),
        };

        let mut config = TrainConfig::default();
        for (k, v) in section("config")? {
            if !config.set(&k, &v)? {
                return Err(bad(format!("unknown config key {k}")));
            }
        }

        let norm = section("norm")?;
        let kind: NormKind = lookup(&norm, "kind")?.parse()?;
        let floats = |key: &str| -> Result<Vec<f64>> { parse_floats(key, &lookup(&norm, key)?) };
        let stats = NormStats {
            kind,
            mu: floats("mu")?,
            sigma: floats("sigma")?,
            min: floats("min")?,
            max: floats("max")?,
        };
        let c = category_names.len();
        if [&stats.mu, &stats.sigma, &stats.min, &stats.max].iter().any(|v| v.len() != c) {
            return Err(bad(format!("normalization statistics do not cover {c} categories")));
        }

        let mut params = ParamStore::new();
        let mut offset = 0;
        for (name, dims) in section("params")? {
            let shape = dims
                .split('x')
                .map(|d| parse_value::<usize>(&name, d))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let end = offset + 8 * n;
            let chunk = payload
                .get(offset..end)
                .ok_or_else(|| bad(format!("payload too short for {name}")))?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            if params.contains(&name) {
                return Err(bad(format!("duplicate parameter {name}")));
            }
            params.push(name, Tensor::new(shape, data)?);
            offset = end;
        }
        if offset != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - offset)));
        }
        Ok(Checkpoint {
            config,
            n_regions,
            category_names,
            stats,
            best_epoch,
            best_val_mae,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| StsError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| StsError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
