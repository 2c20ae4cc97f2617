//! Direct evaluators used as ground truth for compiled plans.
//!
//! The quantized oracle computes every affine output as an exact sum of
//! snapped integer weights times input codes, then rounds once into the
//! output format. It shares formats and rounding rules with the compiler
//! but none of its partitioning, tabulation or scheduling.

use crate::compiler::{ActivationKind, ConvShape, LayerOp, NetworkPlan, OutputRounding};
use crate::engine::rounder::StochasticRounder;
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::formats::{round_to_grid, snap_weights, Code, NumericFormat, RoundMode, Rounding, SnappedWeights};
use crate::modelio::{LayerKind, WeightContainer};

/// Quantization settings of one affine layer and its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuant {
    pub output_format: NumericFormat,
    pub rounding: OutputRounding,
    pub activation_format: Option<NumericFormat>,
}

/// Quantization settings of a network, one entry per affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSpec {
    pub input_format: NumericFormat,
    pub weight_bits: u32,
    pub layers: Vec<LayerQuant>,
}

impl QuantSpec {
    /// Reads the formats a compiled plan committed to.
    pub fn from_plan(plan: &NetworkPlan) -> Result<Self> {
        let mut layers: Vec<LayerQuant> = Vec::new();
        let mut weight_bits = None;
        for l in &plan.layers {
            match &l.op {
                LayerOp::Affine(a) => {
                    if weight_bits.is_some_and(|b| b != a.weight_bits) {
                        return Err(Error::Contract("layers use different weight widths".into()));
                    }
                    weight_bits = Some(a.weight_bits);
                    layers.push(LayerQuant {
                        output_format: a.output_format,
                        rounding: a.rounding,
                        activation_format: None,
                    });
                }
                LayerOp::Relu { .. } | LayerOp::Table { .. } => {
                    let last = layers
                        .last_mut()
                        .ok_or_else(|| Error::Contract("activation before any affine layer".into()))?;
                    last.activation_format = Some(l.output_format);
                }
                LayerOp::MaxPool { .. } => {}
            }
        }
        Ok(QuantSpec {
            input_format: plan.input_format,
            weight_bits: weight_bits.unwrap_or(16),
            layers,
        })
    }
}

fn round_acc(
    acc: &[i128],
    acc_exp: i32,
    output: NumericFormat,
    rounding: &OutputRounding,
    unit: Option<&mut StochasticRounder>,
) -> Result<Vec<Code>> {
    let (OutputRounding::Stochastic { frac_bits, .. }, Some(unit)) = (rounding, unit) else {
        return Ok(acc
            .iter()
            .map(|&v| output.encode_scaled(v, acc_exp, RoundMode::NearestEven))
            .collect());
    };
    let NumericFormat::Fixed(f) = output else {
        return Err(Error::Contract("stochastic rounding needs a fixed-point output".into()));
    };
    let gap = f.scale() - acc_exp;
    if gap <= 0 {
        return Ok(acc
            .iter()
            .map(|&v| output.encode_scaled(v, acc_exp, RoundMode::Floor))
            .collect());
    }
    let step = 1i128 << gap;
    let denom = (1u64 << frac_bits) as f64;
    Ok(acc
        .iter()
        .map(|&v| {
            let floor = v.div_euclid(step);
            let rem = v.rem_euclid(step);
            // fraction truncated to frac_bits bits
            let frac = if gap as u32 >= *frac_bits {
                rem >> (gap as u32 - frac_bits)
            } else {
                rem << (frac_bits - gap as u32)
            };
            let q = floor + unit.draw_up(frac as f64 / denom) as i128;
            let q = q.clamp(f.min_int() as i128, f.max_int() as i128);
            f.from_int(q as i64)
        })
        .collect())
}

fn new_unit(rounding: &OutputRounding) -> Result<Option<StochasticRounder>> {
    match *rounding {
        OutputRounding::Stochastic { r_count, seed, .. } => Ok(Some(StochasticRounder::seeded(r_count, seed)?)),
        OutputRounding::NearestEven => Ok(None),
    }
}

fn dense_acc(w: &SnappedWeights, bias: &[f32], p: usize, q: usize, x: &[Code], input: NumericFormat) -> Result<(Vec<i128>, i32)> {
    let acc_exp = w.exp + input.unit_exp();
    let xi: Vec<i128> = x.iter().map(|&c| input_int(input, c)).collect();
    let mut acc = Vec::with_capacity(p);
    for o in 0..p {
        let row = &w.ints[o * q..(o + 1) * q];
        let s: i128 = row.iter().zip(&xi).map(|(&wv, &xv)| wv as i128 * xv).sum();
        acc.push(s + round_to_grid(bias[o] as f64, acc_exp)?);
    }
    Ok((acc, acc_exp))
}

/// Input value in units of the format's grid; non-finite float codes count as zero.
fn input_int(input: NumericFormat, c: Code) -> i128 {
    if input.is_valid_code(c) {
        input.code_int(c)
    } else {
        0
    }
}

fn check_len(x: &[Code], want: usize) -> Result<()> {
    if x.len() != want {
        return Err(Error::Run(format!("input has {} elements, expected {want}", x.len())));
    }
    Ok(())
}

/// One dense layer `y = W x + b` with `W` `p x q` row-major.
#[allow(clippy::too_many_arguments)]
pub fn dense(
    w: &[f32],
    b: &[f32],
    p: usize,
    q: usize,
    x: &[Code],
    input: NumericFormat,
    output: NumericFormat,
    weight_bits: u32,
    rounding: &OutputRounding,
) -> Result<Vec<Code>> {
    check_len(x, q)?;
    let snapped = snap_weights(w, weight_bits)?;
    let (acc, acc_exp) = dense_acc(&snapped, b, p, q, x, input)?;
    round_acc(&acc, acc_exp, output, rounding, new_unit(rounding)?.as_mut())
}

fn conv_acc(
    w: &SnappedWeights,
    bias: &[f32],
    s: ConvShape,
    x: &[Code],
    input: NumericFormat,
) -> Result<(Vec<i128>, i32)> {
    let acc_exp = w.exp + input.unit_exp();
    let ConvShape { h, w: wd, cin, cout, k } = s;
    let r = s.radius() as isize;
    let b: Vec<i128> = bias.iter().map(|&v| round_to_grid(v as f64, acc_exp)).collect::<Result<_>>()?;
    let mut acc = vec![0i128; h * wd * cout];
    for y in 0..h {
        for xx in 0..wd {
            let out = &mut acc[(y * wd + xx) * cout..][..cout];
            out.copy_from_slice(&b);
            for dy in 0..k {
                for dx in 0..k {
                    let sy = y as isize + dy as isize - r;
                    let sx = xx as isize + dx as isize - r;
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        let v = input_int(input, x[(sy as usize * wd + sx as usize) * cin + ci]);
                        for (co, o) in out.iter_mut().enumerate() {
                            *o += w.ints[((dy * k + dx) * cin + ci) * cout + co] as i128 * v;
                        }
                    }
                }
            }
        }
    }
    Ok((acc, acc_exp))
}

/// One stride-1 "same" convolution over an `[h][w][cin]` image, HWIO kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    kernel: &[f32],
    bias: &[f32],
    shape: ConvShape,
    x: &[Code],
    input: NumericFormat,
    output: NumericFormat,
    weight_bits: u32,
    rounding: &OutputRounding,
) -> Result<Vec<Code>> {
    check_len(x, shape.h * shape.w * shape.cin)?;
    let snapped = snap_weights(kernel, weight_bits)?;
    let (acc, acc_exp) = conv_acc(&snapped, bias, shape, x, input)?;
    round_acc(&acc, acc_exp, output, rounding, new_unit(rounding)?.as_mut())
}

fn maxpool(x: &[Code], shape: &[usize], ph: usize, pw: usize, fmt: NumericFormat) -> Vec<Code> {
    let (w, c) = (shape[1], shape[2]);
    let (oh, ow) = (shape[0] / ph, w / pw);
    let mut y = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = x[((oy * ph) * w + ox * pw) * c + ch];
                for dy in 0..ph {
                    for dx in 0..pw {
                        let v = x[((oy * ph + dy) * w + ox * pw + dx) * c + ch];
                        if fmt.value(v) > fmt.value(best) {
                            best = v;
                        }
                    }
                }
                y.push(best);
            }
        }
    }
    y
}

/// Quantized reference for a whole container.
pub struct Oracle<'c> {
    container: &'c WeightContainer,
    spec: QuantSpec,
    snapped: Vec<Option<SnappedWeights>>,
    shapes: Vec<Vec<usize>>,
}

impl<'c> Oracle<'c> {
    pub fn new(container: &'c WeightContainer, spec: QuantSpec) -> Result<Self> {
        let affine = container.layers.iter().filter(|l| l.kind != LayerKind::MaxPool).count();
        if affine != spec.layers.len() {
            return Err(Error::Contract(format!(
                "container has {affine} affine layers, quantization spec has {}",
                spec.layers.len()
            )));
        }
        let snapped = container
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::MaxPool => Ok(None),
                _ => snap_weights(&l.weights, spec.weight_bits).map(Some),
            })
            .collect::<Result<_>>()?;
        let mut shapes = vec![container.manifest.input_shape.clone()];
        shapes.extend(container.shapes()?);
        Ok(Oracle {
            container,
            spec,
            snapped,
            shapes,
        })
    }

    /// Oracle matching the formats of a compiled plan.
    pub fn for_plan(container: &'c WeightContainer, plan: &NetworkPlan) -> Result<Self> {
        Self::new(container, QuantSpec::from_plan(plan)?)
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    /// Output codes and their format.
    pub fn evaluate(&self, x: &[Code]) -> Result<(Vec<Code>, NumericFormat)> {
        check_len(x, self.shapes[0].iter().product())?;
        let mut fmt = self.spec.input_format;
        let mut cur = x.to_vec();
        let mut quant = self.spec.layers.iter();
        for (i, l) in self.container.layers.iter().enumerate() {
            let shape = &self.shapes[i];
            if l.kind == LayerKind::MaxPool {
                cur = maxpool(&cur, shape, l.dims[0], l.dims[1], fmt);
                continue;
            }
            let lq = quant.next().expect("counted in new");
            let w = self.snapped[i].as_ref().expect("affine layer");
            let (acc, acc_exp) = match l.kind {
                LayerKind::Dense => dense_acc(w, &l.bias, l.dims[0], l.dims[1], &cur, fmt)?,
                _ => conv_acc(
                    w,
                    &l.bias,
                    ConvShape {
                        h: shape[0],
                        w: shape[1],
                        cin: l.dims[2],
                        cout: l.dims[3],
                        k: l.dims[0],
                    },
                    &cur,
                    fmt,
                )?,
            };
            let mut unit = new_unit(&lq.rounding)?;
            cur = round_acc(&acc, acc_exp, lq.output_format, &lq.rounding, unit.as_mut())?;
            fmt = lq.output_format;
            if let Some(kind) = l.activation {
                let out = lq.activation_format.unwrap_or_else(|| kind.default_output(fmt));
                cur = cur
                    .iter()
                    .map(|&c| out.quantize(kind.apply(fmt.value(c)), Rounding::NearestEven))
                    .collect::<Result<_>>()?;
                fmt = out;
            }
        }
        Ok((cur, fmt))
    }

    pub fn predict(&self, x: &[Code]) -> Result<usize> {
        let (y, fmt) = self.evaluate(x)?;
        Ok(argmax_by(&y, |a, b| fmt.value(a) > fmt.value(b)))
    }

    pub fn predict_batch(&self, xs: &[Vec<Code>], policy: ExecPolicy) -> Result<Vec<usize>> {
        exec::map_slice(policy, xs, |x| self.predict(x)).into_iter().collect()
    }
}

fn argmax_by<T: Copy>(v: &[T], greater: impl Fn(T, T) -> bool) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if greater(v[i], v[best]) {
            best = i;
        }
    }
    best
}

/// Unquantized f32 forward pass over real-valued inputs.
pub fn evaluate_reference(container: &WeightContainer, x: &[f32]) -> Result<Vec<f32>> {
    let mut shape = container.manifest.input_shape.clone();
    check_len(&vec![0; x.len()], shape.iter().product())?;
    let mut cur = x.to_vec();
    for l in &container.layers {
        let next_shape = l.output_shape(&shape)?;
        cur = match l.kind {
            LayerKind::Dense => {
                let (p, q) = (l.dims[0], l.dims[1]);
                (0..p)
                    .map(|o| {
                        l.weights[o * q..(o + 1) * q].iter().zip(&cur).map(|(w, v)| w * v).sum::<f32>() + l.bias[o]
                    })
                    .collect()
            }
            LayerKind::Conv2d => {
                let (h, w, k, cin, cout) = (shape[0], shape[1], l.dims[0], l.dims[2], l.dims[3]);
                let r = (k / 2) as isize;
                let mut y = vec![0f32; h * w * cout];
                for oy in 0..h {
                    for ox in 0..w {
                        for co in 0..cout {
                            let mut s = l.bias[co];
                            for dy in 0..k {
                                for dx in 0..k {
                                    let sy = oy as isize + dy as isize - r;
                                    let sx = ox as isize + dx as isize - r;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        s += l.weights[((dy * k + dx) * cin + ci) * cout + co]
                                            * cur[(sy as usize * w + sx as usize) * cin + ci];
                                    }
                                }
                            }
                            y[(oy * w + ox) * cout + co] = s;
                        }
                    }
                }
                y
            }
            LayerKind::MaxPool => {
                let (ph, pw, w, c) = (l.dims[0], l.dims[1], shape[1], shape[2]);
                let mut y = Vec::with_capacity(next_shape.iter().product());
                for oy in 0..next_shape[0] {
                    for ox in 0..next_shape[1] {
                        for ch in 0..c {
                            let mut m = f32::NEG_INFINITY;
                            for dy in 0..ph {
                                for dx in 0..pw {
                                    m = m.max(cur[((oy * ph + dy) * w + ox * pw + dx) * c + ch]);
                                }
                            }
                            y.push(m);
                        }
                    }
                }
                y
            }
        };
        if let Some(kind) = l.activation {
            cur.iter_mut().for_each(|v| *v = kind.apply(*v as f64) as f32);
        }
        shape = next_shape;
    }
    Ok(cur)
}

pub fn predict_reference(container: &WeightContainer, x: &[f32]) -> Result<usize> {
    let y = evaluate_reference(container, x)?;
    Ok(argmax_by(&y, |a: f32, b: f32| a > b))
}

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[u8]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Domain("accuracy of an empty dataset".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Domain(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(&p, &l)| p == l as usize).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Activation applied by the oracle, exposed for tests of scalar tables.
pub fn activation(kind: ActivationKind, x: Code, input: NumericFormat, output: NumericFormat) -> Result<Code> {
    output.quantize(kind.apply(input.value(x)), Rounding::NearestEven)
}
