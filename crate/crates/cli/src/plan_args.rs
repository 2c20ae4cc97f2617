//! Compiler flags shared by `compile`, `eval` and `inspect`. Flags override
//! the matching keys of every layer entry in the configuration file.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use lutnet::compiler::{BiasMode, BitMode, ChunkSpec, LayerConfig, PlanConfig, RoundingName};
use lutnet::formats::FormatName;

#[derive(Args, Debug, Clone, Default)]
pub struct PlanArgs {
    /// Plan configuration file (TOML).
    #[arg(long, visible_alias = "spec")]
    pub config: Option<PathBuf>,
    /// Chunking of dense inputs: a size, `per-element` or `whole`.
    #[arg(long)]
    pub chunks: Option<String>,
    /// `whole-word`, `bitplane` or `bitplane:<g>`.
    #[arg(long)]
    pub bit_mode: Option<BitMode>,
    /// Input patch side for convolutions.
    #[arg(long)]
    pub block: Option<usize>,
    /// Network input format (e.g. `u3`, `u8`, `binary16`).
    #[arg(long)]
    pub input_format: Option<String>,
    /// Output format of every affine layer.
    #[arg(long)]
    pub output_format: Option<String>,
    /// Output format of activations.
    #[arg(long)]
    pub activation_format: Option<String>,
    /// `accumulator-init` or `per-table`.
    #[arg(long, value_parser = parse_bias)]
    pub bias: Option<BiasMode>,
    /// `nearest-even` or `stochastic` (fixed-point outputs only).
    #[arg(long, value_parser = parse_rounding)]
    pub rounding: Option<RoundingName>,
    /// Seed of the stochastic rounding sequence.
    #[arg(long)]
    pub rounding_seed: Option<u64>,
    /// Length R of the stochastic rounding sequence.
    #[arg(long)]
    pub rounding_r: Option<usize>,
    /// Fraction bits indexing the stochastic rounding table.
    #[arg(long)]
    pub rounding_frac_bits: Option<u32>,
    /// Width of snapped weights.
    #[arg(long)]
    pub weight_bits: Option<u32>,
    /// Fixed table element width (default: narrowest that fits).
    #[arg(long)]
    pub entry_bits: Option<u32>,
    /// Cost the plan without materializing tables.
    #[arg(long)]
    pub cost_only: bool,
}

fn parse_bias(s: &str) -> Result<BiasMode, String> {
    match s {
        "accumulator-init" => Ok(BiasMode::AccumulatorInit),
        "per-table" => Ok(BiasMode::PerTable),
        _ => Err(format!("unknown bias mode '{s}' (accumulator-init, per-table)")),
    }
}

fn parse_rounding(s: &str) -> Result<RoundingName, String> {
    match s {
        "nearest-even" => Ok(RoundingName::NearestEven),
        "stochastic" => Ok(RoundingName::Stochastic),
        _ => Err(format!("unknown rounding '{s}' (nearest-even, stochastic)")),
    }
}

fn format_name(s: &Option<String>) -> Result<Option<FormatName>> {
    s.as_deref()
        .map(|f| f.parse().map(FormatName).map_err(anyhow::Error::from))
        .transpose()
}

fn chunk_spec(s: &str) -> ChunkSpec {
    match s.parse::<usize>() {
        Ok(n) => ChunkSpec::Size(n),
        Err(_) => ChunkSpec::Named(s.to_string()),
    }
}

impl PlanArgs {
    /// The configuration file (or defaults) with flags applied. `layers`
    /// lists the affine layers (name, is convolution) of the target network;
    /// `--chunks` reaches dense layers and `--block` convolutions. With no
    /// network, both apply to every entry.
    pub fn resolve(&self, layers: &[(String, bool)]) -> Result<PlanConfig> {
        let mut cfg = match &self.config {
            Some(p) => PlanConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => PlanConfig::default(),
        };
        let input = format_name(&self.input_format)?;
        let output = format_name(&self.output_format)?;
        let activation = format_name(&self.activation_format)?;
        if input.is_some() {
            cfg.input_format = input;
        }
        if self.weight_bits.is_some() {
            cfg.weight_bits = self.weight_bits;
        }
        if self.cost_only {
            cfg.cost_only = Some(true);
        }
        let layer_flags = self.chunks.is_some()
            || self.bit_mode.is_some()
            || self.block.is_some()
            || output.is_some()
            || activation.is_some()
            || self.bias.is_some()
            || self.rounding.is_some()
            || self.rounding_seed.is_some()
            || self.rounding_r.is_some()
            || self.rounding_frac_bits.is_some()
            || self.entry_bits.is_some();
        if !layer_flags {
            return Ok(cfg);
        }
        if cfg.layers.is_empty() {
            cfg.layers = vec![LayerConfig::default(); layers.len().max(1)];
        }
        let mut unnamed = 0;
        for l in &mut cfg.layers {
            let conv = match &l.name {
                Some(n) => layers.iter().find(|(name, _)| name == n).map(|&(_, c)| c),
                None => {
                    unnamed += 1;
                    layers.get(unnamed - 1).map(|&(_, c)| c)
                }
            };
            if let Some(c) = &self.chunks {
                if conv != Some(true) {
                    l.chunks = Some(chunk_spec(c));
                }
            }
            if self.block.is_some() && conv != Some(false) {
                l.block = self.block;
            }
            if self.bit_mode.is_some() {
                l.bit_mode = self.bit_mode;
            }
            if output.is_some() {
                l.output_format = output;
            }
            if activation.is_some() {
                l.activation_format = activation;
            }
            if self.bias.is_some() {
                l.bias = self.bias;
            }
            if self.rounding.is_some() {
                l.rounding = self.rounding;
            }
            if self.rounding_seed.is_some() {
                l.rounding_seed = self.rounding_seed;
            }
            if self.rounding_r.is_some() {
                l.rounding_r = self.rounding_r;
            }
            if self.rounding_frac_bits.is_some() {
                l.rounding_frac_bits = self.rounding_frac_bits;
            }
            if self.entry_bits.is_some() {
                l.entry_bits = self.entry_bits;
            }
        }
        Ok(cfg)
    }
}
