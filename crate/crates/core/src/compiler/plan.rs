use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{Code, NumericFormat};
use crate::lut::{Lut, LutBank};

/// How input elements are cut into table index fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BitMode {
    /// Every element contributes its whole code word.
    #[default]
    WholeWord,
    /// One bit (fixed) or one mantissa plane plus the exponent (float) per element.
    Bitplane,
    /// `g` consecutive planes per element.
    BitplaneGroup(u32),
}

impl BitMode {
    /// Planes per index field, or `None` for whole words.
    pub fn group(&self) -> Option<u32> {
        match self {
            BitMode::WholeWord => None,
            BitMode::Bitplane => Some(1),
            BitMode::BitplaneGroup(g) => Some(*g),
        }
    }
}

impl fmt::Display for BitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BitMode::WholeWord => write!(f, "whole-word"),
            BitMode::Bitplane => write!(f, "bitplane"),
            BitMode::BitplaneGroup(g) => write!(f, "bitplane:{g}"),
        }
    }
}

impl FromStr for BitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whole-word" | "whole" => Ok(BitMode::WholeWord),
            "bitplane" => Ok(BitMode::Bitplane),
            _ => {
                let g = s
                    .strip_prefix("bitplane:")
                    .and_then(|g| g.parse::<u32>().ok())
                    .filter(|&g| g > 0)
                    .ok_or_else(|| Error::Config(format!("unknown bit mode '{s}'")))?;
                Ok(if g == 1 {
                    BitMode::Bitplane
                } else {
                    BitMode::BitplaneGroup(g)
                })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// The bias seeds the accumulator.
    #[default]
    AccumulatorInit,
    /// The bias is split across the tables of a single-pass plan.
    PerTable,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputRounding {
    #[default]
    NearestEven,
    /// Counter-indexed stochastic rounding of fixed-point outputs. The
    /// fraction below the output grid is truncated to `frac_bits` bits and
    /// indexes the rounding table.
    Stochastic { frac_bits: u32, r_count: usize, seed: u64 },
}

/// Extracts one index field from a code word with shifts, masks and compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Field {
    /// `(code >> shift) & mask`
    Bits { shift: u32, mask: u32 },
    /// Mantissa planes `[shift, shift + g)` (implicit bit materialized),
    /// followed by the exponent field and, for signed formats, the sign.
    FloatPlane {
        shift: u32,
        mask: u32,
        frac_bits: u32,
        exp_mask: u32,
        g: u32,
        sign_shift: Option<u32>,
    },
}

impl Field {
    #[inline]
    pub fn extract(&self, code: Code) -> u32 {
        match *self {
            Field::Bits { shift, mask } => code >> shift & mask,
            Field::FloatPlane {
                shift,
                mask,
                frac_bits,
                exp_mask,
                g,
                sign_shift,
            } => {
                let e = code >> frac_bits & exp_mask;
                let hidden = if e != 0 { 1u32 << frac_bits } else { 0 };
                let frac = code & ((1u32 << frac_bits) - 1);
                let v = (frac | hidden) >> shift & mask;
                let s = match sign_shift {
                    Some(ss) => (code >> ss & 1) << (g + exp_mask.count_ones()),
                    None => 0,
                };
                v | e << g | s
            }
        }
    }
}

/// One table application: gather a chunk, look it up, scatter the entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// Logical table id in the layer bank.
    pub table: u32,
    pub gather: u32,
    pub scatter: u32,
}

/// Contiguous run of entry elements added into the accumulator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub entry_off: u32,
    pub out_off: u32,
    pub len: u32,
}

/// All lookups sharing one field extraction and one left shift.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pass {
    pub field: Field,
    /// Width of each element's slot in the index word.
    pub slot_bits: u32,
    pub shift: u32,
    pub subtract: bool,
    pub steps: Vec<Step>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Geometry {
    Dense {
        p: usize,
        q: usize,
        chunks: Vec<Vec<usize>>,
    },
    /// Stride 1, zero "same" padding, `[y][x][c]` layout.
    Conv {
        h: usize,
        w: usize,
        cin: usize,
        cout: usize,
        k: usize,
        block: usize,
    },
}

/// Dense or convolutional layer realized with lookups and shift-adds.
///
/// The accumulator holds exact integers in units of `2^acc_exp`; rounding to
/// `output_format` happens once after the last pass.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffinePlan {
    pub geometry: Geometry,
    pub input_format: NumericFormat,
    pub output_format: NumericFormat,
    pub bit_mode: BitMode,
    pub bias_mode: BiasMode,
    pub rounding: OutputRounding,
    pub in_len: usize,
    pub out_len: usize,
    pub bank: LutBank,
    /// Input offsets per gather; `in_len` addresses an implicit zero code.
    pub gathers: Vec<Vec<u32>>,
    pub scatters: Vec<Vec<Segment>>,
    pub passes: Vec<Pass>,
    pub acc_init: Vec<i128>,
    pub acc_exp: i32,
    pub weight_exp: i32,
    pub weight_bits: u32,
    /// Tables were not materialized; the plan can be costed but not run.
    pub cost_only: bool,
}

impl AffinePlan {
    /// Number of lookups per inference.
    pub fn lut_evals(&self) -> u64 {
        self.passes.iter().map(|p| p.steps.len() as u64).sum()
    }

    pub fn is_signed_path(&self) -> bool {
        self.passes.iter().any(|p| p.subtract)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerOp {
    Affine(Box<AffinePlan>),
    /// `code >> sign_shift != 0` selects zero; otherwise the code passes through.
    Relu { sign_shift: u32 },
    /// Elementwise scalar table over input codes.
    Table { lut: Lut },
    /// Max over precomputed input windows.
    MaxPool { windows: Vec<Vec<u32>> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub input_format: NumericFormat,
    pub output_format: NumericFormat,
    pub op: LayerOp,
}

impl LayerPlan {
    pub fn kind(&self) -> &'static str {
        match &self.op {
            LayerOp::Affine(a) => match a.geometry {
                Geometry::Dense { .. } => "dense",
                Geometry::Conv { .. } => "conv2d",
            },
            LayerOp::Relu { .. } => "relu",
            LayerOp::Table { .. } => "table",
            LayerOp::MaxPool { .. } => "maxpool",
        }
    }

    pub fn affine(&self) -> Option<&AffinePlan> {
        match &self.op {
            LayerOp::Affine(a) => Some(a),
            _ => None,
        }
    }

    pub fn micro_ops(&self) -> BTreeSet<MicroOp> {
        use MicroOp::*;
        match &self.op {
            LayerOp::Affine(a) => {
                let mut ops: BTreeSet<MicroOp> = [Gather, Lookup, ShiftLeft, Add].into();
                if a.is_signed_path() {
                    ops.insert(Subtract);
                }
                // output rounding: shifts plus saturation compares
                ops.extend([Compare, Select]);
                if matches!(a.rounding, OutputRounding::Stochastic { .. }) {
                    ops.insert(Lookup);
                }
                ops
            }
            LayerOp::Relu { .. } => [Compare, Select].into(),
            LayerOp::Table { .. } => [Lookup].into(),
            LayerOp::MaxPool { .. } => [Gather, Compare, Select].into(),
        }
    }
}

/// Primitive operations a schedule may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MicroOp {
    Gather,
    Lookup,
    ShiftLeft,
    Add,
    Subtract,
    Compare,
    Select,
    /// Only the reference evaluator uses it.
    Multiply,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub input_format: NumericFormat,
    pub layers: Vec<LayerPlan>,
}

impl NetworkPlan {
    /// A one-layer network around a compiled affine layer.
    pub fn from_affine(name: &str, plan: AffinePlan) -> Self {
        let (input_shape, output_shape) = match plan.geometry {
            Geometry::Dense { p, q, .. } => (vec![q], vec![p]),
            Geometry::Conv { h, w, cin, cout, .. } => (vec![h, w, cin], vec![h, w, cout]),
        };
        NetworkPlan {
            name: name.to_string(),
            input_shape: input_shape.clone(),
            input_format: plan.input_format,
            layers: vec![LayerPlan {
                name: name.to_string(),
                input_shape,
                output_shape,
                input_format: plan.input_format,
                output_format: plan.output_format,
                op: LayerOp::Affine(Box::new(plan)),
            }],
        }
    }

    /// Number of input elements.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map_or(&self.input_shape[..], |l| &l.output_shape[..])
    }

    pub fn output_format(&self) -> NumericFormat {
        self.layers
            .last()
            .map_or(self.input_format, |l| l.output_format)
    }

    pub fn micro_ops(&self) -> BTreeSet<MicroOp> {
        self.layers.iter().flat_map(LayerPlan::micro_ops).collect()
    }

    pub fn lut_bits(&self) -> u128 {
        self.layers
            .iter()
            .map(|l| match &l.op {
                LayerOp::Affine(a) => a.bank.size_bits(),
                LayerOp::Table { lut } => lut.size_bits(),
                _ => 0,
            })
            .sum()
    }

    pub fn is_runnable(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.affine().is_none_or(|a| !a.cost_only))
    }
}
