//! Executes compiled plans with lookups, shifts, adds, subtracts, compares
//! and selects only. Every address the hot path touches was precomputed by
//! the compiler, so this module contains no multiplication.

pub mod rounder;

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::compiler::{AffinePlan, LayerOp, NetworkPlan, OutputRounding};
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::formats::{Code, FixedFormat, NumericFormat, QuantizedTensor, RoundMode};
use rounder::StochasticRounder;

/// Operations executed by one or more inferences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTally {
    /// Affine-layer table lookups.
    pub lut_evals: u64,
    /// Elementwise activation-table lookups.
    pub scalar_lookups: u64,
    /// Accumulations into an output already written in the same pass.
    pub shift_adds_c1: u64,
    /// Every accumulated entry element.
    pub shift_adds_c2: u64,
    pub compares: u64,
    /// Always zero; kept so reports can state it.
    pub multiplies: u64,
}

impl Add for OpTally {
    type Output = OpTally;

    fn add(self, o: OpTally) -> OpTally {
        OpTally {
            lut_evals: self.lut_evals + o.lut_evals,
            scalar_lookups: self.scalar_lookups + o.scalar_lookups,
            shift_adds_c1: self.shift_adds_c1 + o.shift_adds_c1,
            shift_adds_c2: self.shift_adds_c2 + o.shift_adds_c2,
            compares: self.compares + o.compares,
            multiplies: self.multiplies + o.multiplies,
        }
    }
}

impl AddAssign for OpTally {
    fn add_assign(&mut self, o: OpTally) {
        *self = *self + o;
    }
}

/// A plan ready to run, with its stochastic rounding units.
///
/// Rounders are cloned per inference so every sample starts at counter 0;
/// batch results therefore do not depend on scheduling.
#[derive(Clone, Debug)]
pub struct Engine<'p> {
    plan: &'p NetworkPlan,
    rounders: Vec<Option<StochasticRounder>>,
}

fn carry_rounder(frac_bits: u32, r_count: usize, seed: u64) -> Result<StochasticRounder> {
    let input = NumericFormat::Fixed(FixedFormat::unsigned(frac_bits));
    let output = NumericFormat::Fixed(FixedFormat::new(1, false, 0)?);
    StochasticRounder::seeded(r_count, seed)?.with_tables(input, output)
}

impl<'p> Engine<'p> {
    pub fn new(plan: &'p NetworkPlan) -> Result<Self> {
        Self::build(plan, None)
    }

    /// Overrides the seed of every stochastic rounding unit.
    pub fn with_seed(plan: &'p NetworkPlan, seed: u64) -> Result<Self> {
        Self::build(plan, Some(seed))
    }

    fn build(plan: &'p NetworkPlan, seed: Option<u64>) -> Result<Self> {
        let mut rounders = Vec::with_capacity(plan.layers.len());
        for l in &plan.layers {
            let r = match &l.op {
                LayerOp::Affine(a) if a.cost_only => {
                    return Err(Error::Run(format!(
                        "layer '{}' was compiled cost-only and has no tables",
                        l.name
                    )))
                }
                LayerOp::Affine(a) => match a.rounding {
                    OutputRounding::Stochastic {
                        frac_bits,
                        r_count,
                        seed: s,
                    } => Some(carry_rounder(frac_bits, r_count, seed.unwrap_or(s))?),
                    OutputRounding::NearestEven => None,
                },
                _ => None,
            };
            rounders.push(r);
        }
        Ok(Engine { plan, rounders })
    }

    pub fn plan(&self) -> &NetworkPlan {
        self.plan
    }

    fn check_input(&self, x: &[Code]) -> Result<()> {
        let want = self.plan.input_len();
        if x.len() != want {
            return Err(Error::Run(format!(
                "input has {} elements, plan expects {want} ({:?})",
                x.len(),
                self.plan.input_shape
            )));
        }
        let fmt = self.plan.input_format;
        if let Some(&bad) = x.iter().find(|&&c| !fmt.is_valid_code(c)) {
            return Err(Error::Run(format!("input code {bad:#x} is not a valid {fmt} code")));
        }
        Ok(())
    }

    fn forward(&self, x: &[Code], mut tallies: Option<&mut Vec<OpTally>>) -> Result<Vec<Code>> {
        self.check_input(x)?;
        let mut rounders = self.rounders.clone();
        let mut cur = x.to_vec();
        for (l, rounder) in self.plan.layers.iter().zip(rounders.iter_mut()) {
            let mut t = OpTally::default();
            let traced = tallies.is_some();
            cur = match &l.op {
                LayerOp::Affine(a) => run_affine(a, &cur, rounder.as_mut(), traced.then_some(&mut t))?,
                LayerOp::Relu { sign_shift } => {
                    t.compares += cur.len() as u64;
                    cur.iter()
                        .map(|&c| if (c as u64) >> sign_shift != 0 { 0 } else { c })
                        .collect()
                }
                LayerOp::Table { lut } => {
                    t.scalar_lookups += cur.len() as u64;
                    let mut out = [0u64];
                    let mut y = Vec::with_capacity(cur.len());
                    for &c in &cur {
                        lut.lookup_raw(c as u64, &mut out)?;
                        y.push(out[0] as Code);
                    }
                    y
                }
                LayerOp::MaxPool { windows } => {
                    let fmt = l.input_format;
                    let mut y = Vec::with_capacity(windows.len());
                    for win in windows {
                        let mut best = cur[win[0] as usize];
                        let mut best_key = fmt.order_key(best);
                        for &i in &win[1..] {
                            let c = cur[i as usize];
                            let key = fmt.order_key(c);
                            if key > best_key {
                                best = c;
                                best_key = key;
                            }
                        }
                        t.compares += (win.len() - 1) as u64;
                        y.push(best);
                    }
                    y
                }
            };
            if let Some(ts) = tallies.as_deref_mut() {
                ts.push(t);
            }
        }
        Ok(cur)
    }

    pub fn infer(&self, x: &[Code]) -> Result<Vec<Code>> {
        self.forward(x, None)
    }

    /// Output plus per-layer operation tallies.
    pub fn infer_traced(&self, x: &[Code]) -> Result<(Vec<Code>, Vec<OpTally>)> {
        let mut t = Vec::with_capacity(self.plan.layers.len());
        let y = self.forward(x, Some(&mut t))?;
        Ok((y, t))
    }

    pub fn infer_batch(&self, xs: &[Vec<Code>], policy: ExecPolicy) -> Result<Vec<Vec<Code>>> {
        exec::map_slice(policy, xs, |x| self.infer(x)).into_iter().collect()
    }

    /// Predicted class (argmax of the output codes) per input.
    pub fn predict_batch(&self, xs: &[Vec<Code>], policy: ExecPolicy) -> Result<Vec<usize>> {
        let fmt = self.plan.output_format();
        exec::map_slice(policy, xs, |x| self.infer(x).map(|y| argmax(&y, fmt)))
            .into_iter()
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(codes: &[Code], fmt: NumericFormat) -> usize {
    let mut best = 0;
    for (i, &c) in codes.iter().enumerate().skip(1) {
        if fmt.order_key(c) > fmt.order_key(codes[best]) {
            best = i;
        }
    }
    best
}

fn run_affine(
    a: &AffinePlan,
    x: &[Code],
    rounder: Option<&mut StochasticRounder>,
    mut tally: Option<&mut OpTally>,
) -> Result<Vec<Code>> {
    let mut xs = Vec::with_capacity(a.in_len + 1);
    xs.extend_from_slice(x);
    // zero slot for padded gathers
    xs.push(0);
    let mut acc = a.acc_init.clone();
    let widest = a.bank.tables().iter().map(|t| t.entry_len()).max().unwrap_or(0);
    let mut entry = vec![0i64; widest];
    let mut touched = vec![false; if tally.is_some() { a.out_len } else { 0 }];

    for pass in &a.passes {
        touched.fill(false);
        let shift = pass.shift;
        for step in &pass.steps {
            let mut idx = 0u64;
            let mut sh = 0u32;
            for &off in &a.gathers[step.gather as usize] {
                idx |= (pass.field.extract(xs[off as usize]) as u64) << sh;
                sh += pass.slot_bits;
            }
            let lut = a.bank.resolve_unchecked(step.table);
            let e = &mut entry[..lut.entry_len()];
            lut.lookup_into(idx, e)?;
            for seg in &a.scatters[step.scatter as usize] {
                let src = &e[seg.entry_off as usize..][..seg.len as usize];
                let dst = &mut acc[seg.out_off as usize..][..seg.len as usize];
                if pass.subtract {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d -= (s as i128) << shift;
                    }
                } else {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += (s as i128) << shift;
                    }
                }
            }
            if let Some(t) = tally.as_deref_mut() {
                t.lut_evals += 1;
                for seg in &a.scatters[step.scatter as usize] {
                    let lo = seg.out_off as usize;
                    for seen in &mut touched[lo..lo + seg.len as usize] {
                        if *seen {
                            t.shift_adds_c1 += 1;
                        }
                        *seen = true;
                    }
                    t.shift_adds_c2 += seg.len as u64;
                }
            }
        }
    }
    Ok(round_out(a, &acc, rounder))
}

fn round_out(a: &AffinePlan, acc: &[i128], rounder: Option<&mut StochasticRounder>) -> Vec<Code> {
    let fmt = a.output_format;
    match (rounder, fmt) {
        (Some(unit), NumericFormat::Fixed(f)) => {
            let OutputRounding::Stochastic { frac_bits, .. } = a.rounding else {
                unreachable!("rounder without stochastic rounding")
            };
            let shift = f.scale() - a.acc_exp;
            if shift <= 0 {
                // accumulator grid is no finer than the output grid: exact
                return acc
                    .iter()
                    .map(|&v| fmt.encode_scaled(v, a.acc_exp, RoundMode::Floor))
                    .collect();
            }
            let shift = shift as u32;
            let (lo, hi) = (f.min_int() as i128, f.max_int() as i128);
            acc.iter()
                .map(|&v| {
                    let floor = v >> shift;
                    let rem = v - (floor << shift);
                    let frac = if shift >= frac_bits {
                        rem >> (shift - frac_bits)
                    } else {
                        rem << (frac_bits - shift)
                    };
                    let up = unit.lookup_fast(frac as u64) as i128;
                    let q = floor + up;
                    let q = if q > hi {
                        unit.note_saturation();
                        hi
                    } else if q < lo {
                        lo
                    } else {
                        q
                    };
                    f.from_int(q as i64)
                })
                .collect()
        }
        _ => acc
            .iter()
            .map(|&v| fmt.encode_scaled(v, a.acc_exp, RoundMode::NearestEven))
            .collect(),
    }
}

fn check_tensor(plan: &NetworkPlan, input: &QuantizedTensor) -> Result<()> {
    if input.format() != plan.input_format {
        return Err(Error::Run(format!(
            "input format {} does not match plan input {}",
            input.format(),
            plan.input_format
        )));
    }
    Ok(())
}

fn wrap(plan: &NetworkPlan, codes: Vec<Code>) -> Result<QuantizedTensor> {
    QuantizedTensor::new(plan.output_shape().to_vec(), plan.output_format(), codes)
}

pub fn run(plan: &NetworkPlan, input: &QuantizedTensor) -> Result<QuantizedTensor> {
    check_tensor(plan, input)?;
    wrap(plan, Engine::new(plan)?.infer(input.codes())?)
}

/// Output and the summed operation tally.
pub fn run_traced(plan: &NetworkPlan, input: &QuantizedTensor) -> Result<(QuantizedTensor, OpTally)> {
    check_tensor(plan, input)?;
    let (y, t) = Engine::new(plan)?.infer_traced(input.codes())?;
    Ok((wrap(plan, y)?, t.into_iter().fold(OpTally::default(), Add::add)))
}

pub fn run_batch(plan: &NetworkPlan, inputs: &[QuantizedTensor], policy: ExecPolicy) -> Result<Vec<QuantizedTensor>> {
    let engine = Engine::new(plan)?;
    exec::map_slice(policy, inputs, |x| {
        check_tensor(plan, x)?;
        wrap(plan, engine.infer(x.codes())?)
    })
    .into_iter()
    .collect()
}

pub fn count_runtime_ops(plan: &NetworkPlan, input: &QuantizedTensor) -> Result<OpTally> {
    run_traced(plan, input).map(|(_, t)| t)
}
