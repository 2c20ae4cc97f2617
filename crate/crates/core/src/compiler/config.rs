//! Human-edited plan configuration (TOML).
//!
//! ```toml
//! weight_bits = 16
//! input_format = "u3"
//!
//! [[layer]]
//! name = "dense"          # optional; unnamed entries apply to affine layers in order
//! chunks = 14             # or "per-element", "whole", [[0, 1], [2, 3]]
//! bit_mode = "bitplane"   # "whole-word", "bitplane", "bitplane:<g>"
//! output_format = "binary16"
//! bias = "accumulator-init"
//! rounding = "nearest-even"
//! ```

use serde::{Deserialize, Serialize};

use super::plan::{BiasMode, BitMode};
use crate::error::{Error, Result};
use crate::formats::FormatName;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChunkSpec {
    Size(usize),
    Named(String),
    Explicit(Vec<Vec<usize>>),
}

impl ChunkSpec {
    pub fn resolve(&self, q: usize) -> Result<Vec<Vec<usize>>> {
        match self {
            ChunkSpec::Size(0) => Err(Error::Config("chunk size must be positive".into())),
            ChunkSpec::Size(s) => Ok((0..q)
                .step_by(*s)
                .map(|a| (a..(a + s).min(q)).collect())
                .collect()),
            ChunkSpec::Named(n) if n == "per-element" => Ok((0..q).map(|i| vec![i]).collect()),
            ChunkSpec::Named(n) if n == "whole" => Ok(vec![(0..q).collect()]),
            ChunkSpec::Named(n) => Err(Error::Config(format!(
                "unknown chunking '{n}' (per-element, whole, a size, or explicit lists)"
            ))),
            ChunkSpec::Explicit(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingName {
    NearestEven,
    Stochastic,
}

fn bit_mode_de<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<BitMode>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    s.map(|s| s.parse().map_err(serde::de::Error::custom)).transpose()
}

fn bit_mode_ser<S: serde::Serializer>(m: &Option<BitMode>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match m {
        Some(m) => s.serialize_str(&m.to_string()),
        None => s.serialize_none(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chunks: Option<ChunkSpec>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "bit_mode_de",
        serialize_with = "bit_mode_ser"
    )]
    pub bit_mode: Option<BitMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_format: Option<FormatName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_format: Option<FormatName>,
    /// Output format of the activation that follows the layer, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_format: Option<FormatName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_only: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding: Option<RoundingName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding_r: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rounding_frac_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_bits: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_bits: Option<u32>,
    /// Network input format; overrides the container manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_format: Option<FormatName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_only: Option<bool>,
    #[serde(default, rename = "layer", skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerConfig>,
}

impl PlanConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Settings for the `index`-th affine layer named `name`: a named entry
    /// wins, otherwise the `index`-th unnamed entry.
    pub fn layer(&self, name: &str, index: usize) -> LayerConfig {
        if let Some(c) = self.layers.iter().find(|c| c.name.as_deref() == Some(name)) {
            return c.clone();
        }
        self.layers
            .iter()
            .filter(|c| c.name.is_none())
            .nth(index)
            .cloned()
            .unwrap_or_default()
    }
}
