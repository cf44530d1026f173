use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pca::Truncation;

/// How many input directions a layer keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputConfig {
    /// Fixed effective dimensionality `m_e`.
    Dims(usize),
    /// Keep PCA directions with variance above the threshold.
    Threshold { threshold: f64 },
}

/// How many outputs (units or filters) a layer keeps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OutputConfig {
    /// Keep-count `|S|`.
    Keep(usize),
    /// Keep outputs whose L1 score exceeds the threshold.
    Threshold { threshold: f64 },
}

impl From<usize> for InputConfig {
    fn from(k: usize) -> Self {
        InputConfig::Dims(k)
    }
}

impl From<f64> for InputConfig {
    fn from(threshold: f64) -> Self {
        InputConfig::Threshold { threshold }
    }
}

impl From<usize> for OutputConfig {
    fn from(k: usize) -> Self {
        OutputConfig::Keep(k)
    }
}

impl From<f64> for OutputConfig {
    fn from(threshold: f64) -> Self {
        OutputConfig::Threshold { threshold }
    }
}

impl From<InputConfig> for Truncation {
    fn from(c: InputConfig) -> Self {
        match c {
            InputConfig::Dims(k) => Truncation::Fixed(k),
            InputConfig::Threshold { threshold } => Truncation::Threshold(threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

/// Which layers to rewrite, and when.
///
/// ```toml
/// transform_epoch = 2
/// post_epochs = 18
///
/// [layers]
/// conv1 = { output = 40 }
/// conv2 = { input = 20, output = 50 }
/// fc1 = { input = { threshold = 0.1 } }
/// ```
///
/// A layer with `input` is in the input set I; one with `output` is in the
/// output set O.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPlan {
    /// Epochs trained before the transformation (K).
    pub transform_epoch: usize,
    /// Epochs trained after it (T).
    pub post_epochs: usize,
    #[serde(default)]
    pub layers: BTreeMap<String, LayerConfig>,
}

impl TransformPlan {
    pub fn new(transform_epoch: usize, post_epochs: usize) -> Self {
        Self {
            transform_epoch,
            post_epochs,
            layers: BTreeMap::new(),
        }
    }

    /// Adds one layer entry; `None` leaves that side untransformed.
    pub fn with(mut self, layer: &str, input: Option<InputConfig>, output: Option<OutputConfig>) -> Self {
        self.layers.insert(layer.to_string(), LayerConfig { input, output });
        self
    }

    pub fn input_set(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|(_, c)| c.input.is_some())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn output_set(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|(_, c)| c.output.is_some())
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn input_config(&self, layer: &str) -> Option<InputConfig> {
        self.layers.get(layer).and_then(|c| c.input)
    }

    pub fn output_config(&self, layer: &str) -> Option<OutputConfig> {
        self.layers.get(layer).and_then(|c| c.output)
    }

    /// Parses the compact tuple notation
    /// `conv1:(None, 40), conv2:(20, 50), fc1:(0.1, None)`, where integers are
    /// counts and decimals are thresholds.
    pub fn parse_tuples(text: &str, transform_epoch: usize, post_epochs: usize) -> Result<Self> {
        let mut plan = TransformPlan::new(transform_epoch, post_epochs);
        let bad = |what: &str| Error::plan(format!("cannot parse layer tuple '{what}'"));
        let body = text.trim().trim_start_matches('{').trim_end_matches('}');
        for entry in body.split(')').map(str::trim).filter(|s| !s.is_empty()) {
            let entry = entry.trim_start_matches(',').trim();
            let (name, rest) = entry.split_once(':').ok_or_else(|| bad(entry))?;
            let rest = rest.trim().strip_prefix('(').ok_or_else(|| bad(entry))?;
            let (a, b) = rest.split_once(',').ok_or_else(|| bad(entry))?;
            let field = |s: &str| -> Result<Option<(Option<usize>, f64)>> {
                let s = s.trim();
                if s.eq_ignore_ascii_case("none") {
                    return Ok(None);
                }
                if let Ok(k) = s.parse::<usize>() {
                    return Ok(Some((Some(k), 0.0)));
                }
                s.parse::<f64>().map(|t| Some((None, t))).map_err(|_| bad(entry))
            };
            let input = field(a)?.map(|(k, t)| k.map_or(InputConfig::Threshold { threshold: t }, InputConfig::Dims));
            let output = field(b)?.map(|(k, t)| k.map_or(OutputConfig::Threshold { threshold: t }, OutputConfig::Keep));
            plan = plan.with(name.trim(), input, output);
        }
        Ok(plan)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::plan(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::plan(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p)
            .map_err(|e| Error::plan(format!("cannot read plan file {}: {e}", p.display())))?;
        toml::from_str(&text).map_err(|e| Error::plan(format!("{}: {e}", p.display())))
    }
}
