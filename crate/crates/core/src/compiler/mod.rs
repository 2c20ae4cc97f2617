//! Compiles layer weights and partition settings into look-up tables plus a
//! shift-and-add schedule.

mod activation;
mod config;
mod conv;
mod dense;
mod plan;

pub use activation::{compile_activation, compile_maxpool, compile_scalar, ActivationKind};
pub use config::{ChunkSpec, LayerConfig, PlanConfig, RoundingName};
pub use conv::{compile_conv2d, ConvShape};
pub use dense::{compile_dense, compile_signed, pass_count, LayerOptions, PartitionConfig};
pub use plan::*;

use crate::costs::{self, ConvGeometry, CostReport};
use crate::engine::rounder::DEFAULT_SEED;
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::formats::{FixedFormat, NumericFormat};
use crate::lut::Caps;
use crate::modelio::{LayerKind, LayerRecord, WeightContainer};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkOptions {
    pub caps: Caps,
    pub policy: ExecPolicy,
    /// Cost every layer without materializing tables.
    pub cost_only: bool,
    /// Entry element width used for nominal sizes in capacity messages.
    pub nominal_entry_bits: u32,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        NetworkOptions {
            caps: Caps::default(),
            policy: ExecPolicy::Parallel,
            cost_only: false,
            nominal_entry_bits: 16,
        }
    }
}

/// An affine layer with every setting resolved.
struct Resolved<'a> {
    record: &'a LayerRecord,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    input_format: NumericFormat,
    bit_mode: BitMode,
    chunks: Vec<Vec<usize>>,
    block: usize,
    opts: LayerOptions,
    activation_format: Option<NumericFormat>,
}

impl Resolved<'_> {
    fn cost(&self, r_o: u32) -> Result<CostReport> {
        match self.record.kind {
            LayerKind::Dense => {
                let sizes: Vec<usize> = self.chunks.iter().map(Vec::len).collect();
                costs::cost_dense(
                    self.record.dims[0],
                    self.record.dims[1],
                    &sizes,
                    self.input_format,
                    self.bit_mode,
                    r_o,
                )
            }
            _ => costs::cost_conv(
                ConvGeometry {
                    h: self.in_shape[0],
                    w: self.in_shape[1],
                    cin: self.record.dims[2],
                    cout: self.record.dims[3],
                    k: self.record.dims[0],
                },
                self.block,
                self.input_format,
                self.bit_mode,
                r_o,
            ),
        }
    }
}

/// Network input format: config, then the container manifest, then 8-bit pixels.
pub fn network_input_format(c: &WeightContainer, cfg: &PlanConfig) -> Result<NumericFormat> {
    if let Some(f) = cfg.input_format {
        return Ok(f.0);
    }
    if let Some(first) = c.layers.iter().find(|l| l.kind != LayerKind::MaxPool) {
        if let Some(f) = cfg.layer(&first.name, 0).input_format {
            return Ok(f.0);
        }
    }
    Ok(c.input_format()?
        .unwrap_or(NumericFormat::Fixed(FixedFormat::unsigned(8))))
}

fn resolve<'a>(
    c: &'a WeightContainer,
    cfg: &PlanConfig,
    opts: &NetworkOptions,
) -> Result<(NumericFormat, Vec<Option<Resolved<'a>>>)> {
    let shapes = c.shapes()?;
    let input = network_input_format(c, cfg)?;
    let mut fmt = input;
    let mut shape = c.manifest.input_shape.clone();
    let mut prev_name = "network input".to_string();
    let mut out = Vec::with_capacity(c.layers.len());
    let mut affine = 0;
    for (l, out_shape) in c.layers.iter().zip(&shapes) {
        if l.kind == LayerKind::MaxPool {
            out.push(None);
            shape = out_shape.clone();
            prev_name = l.name.clone();
            continue;
        }
        let lc = cfg.layer(&l.name, affine);
        if let Some(want) = lc.input_format {
            if want.0 != fmt {
                return Err(Error::Compile(format!(
                    "layer '{}' expects {} input but '{prev_name}' produces {fmt}",
                    l.name, want.0
                )));
            }
        }
        let rounding = match lc.rounding {
            Some(RoundingName::Stochastic) => OutputRounding::Stochastic {
                frac_bits: lc.rounding_frac_bits.unwrap_or(8),
                r_count: lc.rounding_r.unwrap_or(crate::engine::rounder::DEFAULT_R),
                seed: lc.rounding_seed.unwrap_or(DEFAULT_SEED),
            },
            _ => OutputRounding::NearestEven,
        };
        let layer_opts = LayerOptions {
            output_format: lc.output_format.map_or(NumericFormat::binary16(), |f| f.0),
            bias: lc.bias.unwrap_or_default(),
            rounding,
            weight_bits: cfg.weight_bits.unwrap_or(16),
            entry_bits: lc.entry_bits,
            cost_only: opts.cost_only || cfg.cost_only.unwrap_or(false) || lc.cost_only.unwrap_or(false),
            caps: opts.caps,
            policy: opts.policy,
        };
        let (chunks, block) = match l.kind {
            LayerKind::Dense => {
                if lc.block.is_some() {
                    return Err(Error::Compile(format!(
                        "layer '{}' is dense; `block` applies to convolutions",
                        l.name
                    )));
                }
                let q = l.dims[1];
                let chunks = match &lc.chunks {
                    Some(spec) => spec.resolve(q)?,
                    None => (0..q).map(|i| vec![i]).collect(),
                };
                (chunks, 1)
            }
            _ => {
                if lc.chunks.is_some() {
                    return Err(Error::Compile(format!(
                        "layer '{}' is a convolution; partition it with `block`, not `chunks`",
                        l.name
                    )));
                }
                (Vec::new(), lc.block.unwrap_or(1))
            }
        };
        let activation_format = lc.activation_format.map(|f| f.0);
        let layer_in = fmt;
        fmt = match l.activation {
            Some(kind) => activation_format.unwrap_or_else(|| kind.default_output(layer_opts.output_format)),
            None => layer_opts.output_format,
        };
        out.push(Some(Resolved {
            record: l,
            in_shape: shape.clone(),
            out_shape: out_shape.clone(),
            input_format: layer_in,
            bit_mode: lc.bit_mode.unwrap_or_default(),
            chunks,
            block,
            opts: layer_opts,
            activation_format,
        }));
        shape = out_shape.clone();
        prev_name = l.name.clone();
        affine += 1;
    }
    Ok((input, out))
}

/// Per-layer nominal cost reports of the affine layers (name, report).
pub fn network_costs(
    c: &WeightContainer,
    cfg: &PlanConfig,
    opts: &NetworkOptions,
) -> Result<Vec<(String, CostReport)>> {
    let (_, resolved) = resolve(c, cfg, opts)?;
    resolved
        .iter()
        .flatten()
        .map(|r| Ok((r.record.name.clone(), r.cost(opts.nominal_entry_bits)?)))
        .collect()
}

/// Compiles a whole container. Activations become their own layers; a
/// network with no layers compiles to the identity.
pub fn compile_network(c: &WeightContainer, cfg: &PlanConfig, opts: &NetworkOptions) -> Result<NetworkPlan> {
    let (input, resolved) = resolve(c, cfg, opts)?;

    let mut costs = Vec::new();
    for r in resolved.iter().flatten() {
        costs.push((r, r.cost(opts.nominal_entry_bits)?));
    }
    let total: CostReport = costs.iter().map(|(_, c)| c.clone()).sum();
    for (r, cost) in &costs {
        if !r.opts.cost_only && !cost.materializable(&opts.caps) {
            return Err(Error::Capacity(format!(
                "layer '{}' needs {} of tables (widest index {} bits) and the network needs {} in total; \
                 limits are {} bits per index and {} per layer; use cost-only mode to report without materializing",
                r.record.name,
                cost.human_size(),
                cost.max_index_bits,
                total.human_size(),
                opts.caps.max_index_bits,
                costs::human_bits(opts.caps.max_bank_bits),
            )));
        }
    }

    let mut layers = Vec::new();
    let mut fmt = input;
    let mut shape = c.manifest.input_shape.clone();
    for (l, r) in c.layers.iter().zip(&resolved) {
        let Some(r) = r else {
            let pool = compile_maxpool(&l.name, &shape, l.dims[0], l.dims[1], fmt)?;
            shape = pool.output_shape.clone();
            layers.push(pool);
            continue;
        };
        let affine = match l.kind {
            LayerKind::Dense => {
                let cfg = PartitionConfig::new(r.chunks.clone(), r.bit_mode, r.input_format);
                compile_dense(&l.weights, &l.bias, l.dims[0], l.dims[1], &cfg, &r.opts)
            }
            _ => compile_conv2d(
                &l.weights,
                &l.bias,
                ConvShape {
                    h: r.in_shape[0],
                    w: r.in_shape[1],
                    cin: l.dims[2],
                    cout: l.dims[3],
                    k: l.dims[0],
                },
                r.block,
                r.bit_mode,
                r.input_format,
                &r.opts,
            ),
        }
        .map_err(|e| match e {
            Error::Compile(m) => Error::Compile(format!("layer '{}': {m}", l.name)),
            other => other,
        })?;
        fmt = affine.output_format;
        layers.push(LayerPlan {
            name: l.name.clone(),
            input_shape: r.in_shape.clone(),
            output_shape: r.out_shape.clone(),
            input_format: r.input_format,
            output_format: fmt,
            op: LayerOp::Affine(Box::new(affine)),
        });
        if let Some(kind) = l.activation {
            let act = compile_activation(
                kind,
                &format!("{}/{kind:?}", l.name).to_lowercase(),
                &r.out_shape,
                fmt,
                r.activation_format,
                &opts.caps,
            )?;
            fmt = act.output_format;
            layers.push(act);
        }
        shape = r.out_shape.clone();
    }
    Ok(NetworkPlan {
        name: c.manifest.name.clone(),
        input_shape: c.manifest.input_shape.clone(),
        input_format: input,
        layers,
    })
}
