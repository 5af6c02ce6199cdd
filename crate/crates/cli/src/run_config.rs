//! The flat run configuration read by every command.

use std::path::Path;

use sts_core::config::{parse_entries, parse_value, render, KeyValue};
use sts_core::data_io::{SlotLayout, SynthConfig};
use sts_core::trainer::TrainConfig;
use sts_core::{Result, StsError};

use crate::manifest::RunManifest;

const SYNTH_STREAM: u64 = 0x7379_6e74;
const TRAIN_STREAM: u64 = 0x7472_6169;

/// SplitMix64 finalizer.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Synthetic-data and training settings plus one master seed.
///
/// `seed` drives both the generator and the trainer through derived
/// streams; `synth_seed` pins the generator on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth_seed: Option<u64>,
    /// Category names for ingested event files; defaults to `c0, c1, …`.
    pub categories: Option<Vec<String>>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut rc = RunConfig {
            seed: 0,
            synth_seed: None,
            categories: None,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        };
        rc.resolve();
        rc
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rc = RunConfig::default();
        for e in parse_entries(text)? {
            let at = |err: StsError| match err {
                StsError::Config(m) => StsError::Config(format!("line {}: {m}", e.line)),
                other => other,
            };
            match e.key.as_str() {
                "seed" => rc.seed = parse_value(&e.key, &e.value).map_err(at)?,
                "synth_seed" => rc.synth_seed = Some(parse_value(&e.key, &e.value).map_err(at)?),
                "categories" => {
                    let names: Vec<String> = e.value.split(',').map(|s| s.trim().to_string()).collect();
                    if names.iter().any(String::is_empty) {
                        return Err(at(StsError::Config("categories must be non-empty names".into())));
                    }
                    rc.categories = Some(names);
                }
                key => {
                    let known = rc.train.set(key, &e.value).map_err(at)? || rc.synth.set(key, &e.value).map_err(at)?;
                    if !known {
                        return Err(StsError::Config(format!("line {}: unknown key '{key}'", e.line)));
                    }
                }
            }
        }
        if let Some(names) = &rc.categories {
            if names.len() != rc.synth.n_categories {
                return Err(StsError::Config(format!(
                    "categories lists {} names but n_categories is {}",
                    names.len(),
                    rc.synth.n_categories
                )));
            }
        }
        rc.resolve();
        rc.train.validate()?;
        rc.synth.validate()?;
        Ok(rc)
    }

    /// Reads key = value text, or the config recorded in a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StsError::io(path.display().to_string(), e))?;
        if text.trim_start().starts_with('{') {
            let m = RunManifest::parse(&text)?;
            return Self::parse(&m.config);
        }
        Self::parse(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolve();
        self
    }

    fn resolve(&mut self) {
        self.synth.seed = self.synth_seed.unwrap_or_else(|| derive_seed(self.seed, SYNTH_STREAM));
        self.train.seed = derive_seed(self.seed, TRAIN_STREAM);
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.clone().unwrap_or_else(|| self.synth.category_names())
    }

    pub fn layout(&self) -> SlotLayout {
        SlotLayout {
            categories: self.category_names(),
            ..self.synth.layout()
        }
    }

    /// Canonical text; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut entries = vec![("seed", self.seed.to_string())];
        if let Some(s) = self.synth_seed {
            entries.push(("synth_seed", s.to_string()));
        }
        if let Some(c) = &self.categories {
            entries.push(("categories", c.join(",")));
        }
        entries.extend(self.synth.entries().into_iter().filter(|(k, _)| *k != "synth_seed"));
        entries.extend(self.train.entries().into_iter().filter(|(k, _)| *k != "seed"));
        render(&entries)
    }
}
