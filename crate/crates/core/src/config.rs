//! Flat `key = value` configuration text.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Result, StsError};

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits config text into entries. Blank lines and lines starting with `#`
/// are skipped; repeated keys are errors.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            StsError::Config(format!("line {}: expected 'key = value', got '{line}'", i + 1))
        })?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(StsError::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(StsError::Config(format!(
                "line {}: key '{key}' already set on line {}",
                i + 1,
                prev.line
            )));
        }
        out.push(Entry {
            line: i + 1,
            key,
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Renders entries in the order given.
pub fn render(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

pub fn parse_value<T>(key: &str, value: &str) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| StsError::Config(format!("invalid value '{value}' for {key}: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(StsError::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

/// Comma-separated list of floats.
pub fn parse_floats(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse_value::<f64>(key, v.trim()))
        .collect()
}

pub fn render_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

/// Implemented by config sections that accept `key = value` settings.
pub trait KeyValue {
    /// Applies one setting. Returns `Ok(false)` if the key is not part of
    /// this section.
    fn set(&mut self, key: &str, value: &str) -> Result<bool>;

    /// Every key with its current value, in canonical order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn to_text(&self) -> String {
        render(&self.entries())
    }
}
