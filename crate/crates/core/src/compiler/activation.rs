use serde::{Deserialize, Serialize};

use super::plan::{LayerOp, LayerPlan};
use crate::error::{Error, Result};
use crate::formats::{FixedFormat, NumericFormat, Rounding};
use crate::lut::{tabulate_codes, Caps};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    Tanh,
}

impl ActivationKind {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::Tanh => x.tanh(),
        }
    }

    /// Output format used when none is configured.
    pub fn default_output(&self, input: NumericFormat) -> NumericFormat {
        match self {
            ActivationKind::Relu => input.nonnegative(),
            ActivationKind::Sigmoid => NumericFormat::Fixed(FixedFormat::unsigned(8)),
            ActivationKind::Tanh => NumericFormat::Fixed(FixedFormat::signed(8)),
        }
    }
}

/// ReLU compiles to a compare-select on the sign bit; the output format is
/// the nonnegative variant of the input, so the sign bit is dropped. Other
/// activations become a scalar table over every input code.
pub fn compile_activation(
    kind: ActivationKind,
    name: &str,
    shape: &[usize],
    input_format: NumericFormat,
    output_format: Option<NumericFormat>,
    caps: &Caps,
) -> Result<LayerPlan> {
    let out_fmt = output_format.unwrap_or_else(|| kind.default_output(input_format));
    let op = match kind {
        ActivationKind::Relu => {
            if out_fmt != input_format.nonnegative() {
                return Err(Error::Compile(format!(
                    "relu maps {input_format} to {}, not {out_fmt}",
                    input_format.nonnegative()
                )));
            }
            let width = input_format.width();
            LayerOp::Relu {
                sign_shift: if input_format.is_signed() { width - 1 } else { width },
            }
        }
        _ => LayerOp::Table {
            lut: compile_scalar(|x| kind.apply(x), input_format, out_fmt, caps)?,
        },
    };
    Ok(LayerPlan {
        name: name.to_string(),
        input_shape: shape.to_vec(),
        output_shape: shape.to_vec(),
        input_format,
        output_format: out_fmt,
        op,
    })
}

/// Table of `f` over every code of `input`, rounded to nearest even in `output`.
pub fn compile_scalar(
    f: impl Fn(f64) -> f64 + Sync + Send,
    input: NumericFormat,
    output: NumericFormat,
    caps: &Caps,
) -> Result<crate::lut::Lut> {
    tabulate_codes(
        |c| {
            let y = f(input.value(c));
            output.quantize(y, Rounding::NearestEven).unwrap_or(0)
        },
        input.width(),
        output,
        caps,
    )
}

/// Non-overlapping `ph x pw` max pooling over `[h][w][c]`; trailing rows and
/// columns that do not fill a window are dropped.
pub fn compile_maxpool(
    name: &str,
    shape: &[usize],
    ph: usize,
    pw: usize,
    format: NumericFormat,
) -> Result<LayerPlan> {
    let [h, w, c] = shape else {
        return Err(Error::Compile(format!(
            "max pooling needs an [h, w, c] input, got {shape:?}"
        )));
    };
    let (h, w, c) = (*h, *w, *c);
    if ph == 0 || pw == 0 || h < ph || w < pw {
        return Err(Error::Compile(format!(
            "pool window {ph}x{pw} does not fit a {h}x{w} image"
        )));
    }
    let (oh, ow) = (h / ph, w / pw);
    let mut windows = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut win = Vec::with_capacity(ph * pw);
                for dy in 0..ph {
                    for dx in 0..pw {
                        win.push((((oy * ph + dy) * w + ox * pw + dx) * c + ch) as u32);
                    }
                }
                windows.push(win);
            }
        }
    }
    Ok(LayerPlan {
        name: name.to_string(),
        input_shape: shape.to_vec(),
        output_shape: vec![oh, ow, c],
        input_format: format,
        output_format: format,
        op: LayerOp::MaxPool { windows },
    })
}
