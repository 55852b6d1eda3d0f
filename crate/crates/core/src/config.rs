//! Run configuration as flat `dotted.key = value` lines.
//!
//! Values are JSON literals (`0.99`, `true`, `null`, `[0.1, 0.5]`); anything
//! that does not parse as JSON is taken as a bare string. Later assignments
//! win, so layering defaults, a file and command-line overrides is just
//! applying them in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::agent::TrainConfig;
use crate::env::{EnvError, GridLayout};
use crate::harness::ExperimentSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error(transparent)]
    Layout(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutConfig {
    /// Layout file; `null` selects the built-in default layout.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogConfig {
    /// Record elapsed seconds in training logs; `false` writes `0.0` so that
    /// logs of identical runs are byte-identical.
    pub wall_time: bool,
    /// Write a checkpoint every this many epochs; `0` keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            wall_time: true,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub layout: LayoutConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSpec,
    pub log: LogConfig,
}

impl RunConfig {
    pub fn load_layout(&self) -> Result<GridLayout, ConfigError> {
        Ok(match &self.layout.file {
            Some(p) => GridLayout::load(p)?,
            None => GridLayout::figure(),
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&self, text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.into(),
            })?;
            if k.trim().is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.into(),
                });
            }
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)
    }

    pub fn apply_file(&self, path: &Path) -> Result<Self, ConfigError> {
        self.apply_text(&std::fs::read_to_string(path)?)
    }

    pub fn apply_pairs(&self, pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in pairs {
            let slot =
                lookup(&mut tree, key).ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
            if slot.is_object() {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        }
        serde_json::from_value(tree).map_err(|e| ConfigError::InvalidValue {
            key: guess_key(pairs),
            message: e.to_string(),
        })
    }

    /// Every leaf as a `key = value` line, sorted by key.
    pub fn to_text(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.sort();
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn lookup<'a>(tree: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    key.split('.')
        .try_fold(tree, |node, part| node.as_object_mut()?.get_mut(part))
}

fn guess_key(pairs: &[(String, String)]) -> String {
    pairs.last().map(|(k, _)| k.clone()).unwrap_or_default()
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => flatten_map(prefix, map, out),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn flatten_map(prefix: &str, map: &Map<String, Value>, out: &mut Vec<(String, String)>) {
    for (k, v) in map {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        flatten(&key, v, out);
    }
}
