use serde::{Deserialize, Serialize};

use super::plan::*;
use crate::costs::human_bits;
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::formats::{round_to_grid, snap_weights, FloatFormat, NumericFormat};
use crate::lut::{tabulate_signed, Caps, Lut, LutBank};

/// Partition of the `q` input elements into chunks, plus the per-element
/// encoding that indexes each chunk's table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub chunks: Vec<Vec<usize>>,
    pub bit_mode: BitMode,
    pub input_format: NumericFormat,
}

impl PartitionConfig {
    pub fn new(chunks: Vec<Vec<usize>>, bit_mode: BitMode, input_format: NumericFormat) -> Self {
        PartitionConfig {
            chunks,
            bit_mode,
            input_format,
        }
    }

    /// One chunk per element.
    pub fn per_element(q: usize, bit_mode: BitMode, input_format: NumericFormat) -> Self {
        Self::new((0..q).map(|i| vec![i]).collect(), bit_mode, input_format)
    }

    /// Consecutive chunks of `size` elements; the last may be shorter.
    pub fn uniform(q: usize, size: usize, bit_mode: BitMode, input_format: NumericFormat) -> Self {
        let size = size.max(1);
        let chunks = (0..q)
            .step_by(size)
            .map(|s| (s..(s + size).min(q)).collect())
            .collect();
        Self::new(chunks, bit_mode, input_format)
    }

    pub fn k(&self) -> usize {
        self.chunks.len()
    }

    /// Chunks must be nonempty, disjoint and cover `0..q`.
    pub fn validate(&self, q: usize) -> Result<()> {
        let mut seen = vec![false; q];
        for c in &self.chunks {
            if c.is_empty() {
                return Err(Error::Compile("empty chunk in partition".into()));
            }
            for &i in c {
                if i >= q {
                    return Err(Error::Compile(format!(
                        "chunk element {i} out of range for q = {q}"
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Compile(format!("element {i} appears in two chunks")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Compile(format!("element {i} is not in any chunk")));
        }
        Ok(())
    }
}

/// Settings shared by every affine layer compile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerOptions {
    pub output_format: NumericFormat,
    pub bias: BiasMode,
    pub rounding: OutputRounding,
    pub weight_bits: u32,
    /// Fixed table element width; by default the narrowest that fits.
    pub entry_bits: Option<u32>,
    pub cost_only: bool,
    pub caps: Caps,
    pub policy: ExecPolicy,
}

impl Default for LayerOptions {
    fn default() -> Self {
        LayerOptions {
            output_format: NumericFormat::binary16(),
            bias: BiasMode::AccumulatorInit,
            rounding: OutputRounding::NearestEven,
            weight_bits: 16,
            entry_bits: None,
            cost_only: false,
            caps: Caps::default(),
            policy: ExecPolicy::Parallel,
        }
    }
}

/// What a table slot value contributes, in units of `2^unit_exp` of the input format.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Contrib {
    Integer,
    FloatWord(FloatFormat),
    FloatPlane(FloatFormat, u32),
}

impl Contrib {
    pub(crate) fn value(&self, slot: u32) -> i128 {
        match *self {
            Contrib::Integer => slot as i128,
            Contrib::FloatWord(f) => {
                if f.is_finite_code(slot) {
                    f.unit_int(slot)
                } else {
                    0
                }
            }
            Contrib::FloatPlane(f, g) => {
                let v = slot & ((1u32 << g) - 1);
                let e = slot >> g & f.exponent_mask();
                if e == f.exponent_mask() {
                    return 0;
                }
                let mag = (v as i128) << (e.max(1) - 1);
                let sign = if f.has_sign() {
                    slot >> (g + f.exponent_bits()) & 1
                } else {
                    0
                };
                if sign == 1 {
                    -mag
                } else {
                    mag
                }
            }
        }
    }
}

/// Index fields and passes for one input format and bit mode. Signed fixed
/// point covers only the low `n-1` bits; the MSB pass comes from `compile_signed`.
pub(crate) struct PassLayout {
    pub contrib: Contrib,
    pub slot_bits: u32,
    pub passes: Vec<(Field, u32)>,
}

fn group_passes(planes: u32, g: u32, what: &str) -> Result<u32> {
    if g == 0 || !planes.is_multiple_of(g) {
        return Err(Error::Compile(format!(
            "bitplane group size {g} does not divide the {planes} {what}"
        )));
    }
    Ok(planes / g)
}

fn mask(bits: u32) -> u32 {
    if bits >= 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    }
}

pub(crate) fn pass_layout(fmt: NumericFormat, mode: BitMode) -> Result<PassLayout> {
    match fmt {
        NumericFormat::Fixed(f) => {
            let planes = if f.is_signed() { f.bits() - 1 } else { f.bits() };
            match mode.group() {
                // planes == 0: a 1-bit signed input is all sign; this empty
                // pass becomes the sign pass in `compile_signed`
                _ if planes == 0 => Ok(PassLayout {
                    contrib: Contrib::Integer,
                    slot_bits: 1,
                    passes: vec![(Field::Bits { shift: 0, mask: 0 }, 0)],
                }),
                None => Ok(PassLayout {
                    contrib: Contrib::Integer,
                    slot_bits: planes.max(1),
                    passes: vec![(Field::Bits { shift: 0, mask: mask(planes) }, 0)],
                }),
                Some(g) => {
                    let count = group_passes(planes, g, "magnitude planes")?;
                    Ok(PassLayout {
                        contrib: Contrib::Integer,
                        slot_bits: g,
                        passes: (0..count)
                            .map(|j| {
                                let shift = j * g;
                                (Field::Bits { shift, mask: mask(g) }, shift)
                            })
                            .collect(),
                    })
                }
            }
        }
        NumericFormat::Float(f) => match mode.group() {
            None => Ok(PassLayout {
                contrib: Contrib::FloatWord(f),
                slot_bits: f.width(),
                passes: vec![(Field::Bits { shift: 0, mask: mask(f.width()) }, 0)],
            }),
            Some(g) => {
                let count = group_passes(f.mantissa_bits(), g, "mantissa planes")?;
                let sign_shift = f.has_sign().then(|| f.width() - 1);
                Ok(PassLayout {
                    contrib: Contrib::FloatPlane(f, g),
                    slot_bits: g + f.exponent_bits() + f.has_sign() as u32,
                    passes: (0..count)
                        .map(|j| {
                            let shift = j * g;
                            let field = Field::FloatPlane {
                                shift,
                                mask: mask(g),
                                frac_bits: f.frac_bits(),
                                exp_mask: f.exponent_mask(),
                                g,
                                sign_shift,
                            };
                            (field, shift)
                        })
                        .collect(),
                })
            }
        },
    }
}

pub(crate) fn check_rounding(opts: &LayerOptions) -> Result<()> {
    if let OutputRounding::Stochastic {
        frac_bits, r_count, ..
    } = opts.rounding
    {
        if opts.output_format.as_fixed().is_none() {
            return Err(Error::Compile(
                "stochastic rounding is only available for fixed-point outputs".into(),
            ));
        }
        if !(1..=16).contains(&frac_bits) || r_count == 0 {
            return Err(Error::Compile(format!(
                "stochastic rounding needs 1..=16 fraction bits and R >= 1 (got {frac_bits}, {r_count})"
            )));
        }
    }
    Ok(())
}

pub(crate) fn snap_bias(bias: &[f32], acc_exp: i32) -> Result<Vec<i128>> {
    bias.iter()
        .map(|&b| {
            round_to_grid(b as f64, acc_exp)
                .map_err(|e| Error::Compile(format!("bias {b} cannot be placed on the accumulator grid: {e}")))
        })
        .collect()
}

/// A table to tabulate: index width, entry length, and per-slot weight columns.
pub(crate) struct TableJob {
    pub index_bits: u32,
    pub entry_shape: Vec<usize>,
    /// For each slot position, `(entry offset, weights)` pairs to add `w * contrib`.
    pub slots: Vec<Vec<(usize, i64)>>,
    /// Added to every entry (per-table bias share).
    pub base: Vec<i64>,
}

/// Tabulates jobs in order, enforcing entry width and bank capacity.
pub(crate) fn tabulate_jobs(
    jobs: &[TableJob],
    layout: &PassLayout,
    opts: &LayerOptions,
) -> Result<Vec<Lut>> {
    let slot_bits = layout.slot_bits;
    let contrib: Vec<i64> = (0..1u64 << slot_bits)
        .map(|s| {
            let v = layout.contrib.value(s as u32);
            i64::try_from(v).map_err(|_| Error::Compile("input value exceeds 64 bits".into()))
        })
        .collect::<Result<_>>()?;
    let max_c = contrib.iter().map(|c| c.unsigned_abs() as u128).max().unwrap_or(0);

    for job in jobs {
        opts.caps.check_index_bits(job.index_bits)?;
        let len: usize = job.entry_shape.iter().product();
        let mut bound: Vec<u128> = job.base.iter().map(|b| b.unsigned_abs() as u128).collect();
        bound.resize(len, 0);
        for slot in &job.slots {
            for &(off, w) in slot {
                bound[off] += w.unsigned_abs() as u128 * max_c;
            }
        }
        if bound.iter().any(|&b| b > i64::MAX as u128) {
            return Err(Error::Compile(
                "table entries would overflow 64 bits; lower weight_bits or use smaller chunks".into(),
            ));
        }
    }

    let one = |job: &TableJob, policy: ExecPolicy| {
        let slot_mask = (1u64 << slot_bits) - 1;
        tabulate_signed(
            |idx, out: &mut [i64]| {
                if job.base.is_empty() {
                    out.fill(0);
                } else {
                    out.copy_from_slice(&job.base);
                }
                for (pos, slot) in job.slots.iter().enumerate() {
                    let c = contrib[(idx >> (pos as u32 * slot_bits) & slot_mask) as usize];
                    if c != 0 {
                        for &(off, w) in slot {
                            out[off] += w * c;
                        }
                    }
                }
            },
            job.index_bits,
            job.entry_shape.clone(),
            opts.entry_bits,
            &opts.caps,
            policy,
        )
    };
    let luts: Vec<Lut> = if jobs.len() >= 8 {
        exec::map_slice(opts.policy, jobs, |j| one(j, ExecPolicy::Sequential))
            .into_iter()
            .collect::<Result<_>>()?
    } else {
        jobs.iter()
            .map(|j| one(j, opts.policy))
            .collect::<Result<_>>()?
    };
    let total: u128 = luts.iter().map(Lut::size_bits).sum();
    if total > opts.caps.max_bank_bits {
        return Err(Error::Capacity(format!(
            "layer tables need {} which exceeds the materialization cap of {}",
            human_bits(total),
            human_bits(opts.caps.max_bank_bits)
        )));
    }
    Ok(luts)
}

/// Compiles `y = W x + b` for a `p x q` row-major `W`.
pub fn compile_dense(
    w: &[f32],
    b: &[f32],
    p: usize,
    q: usize,
    cfg: &PartitionConfig,
    opts: &LayerOptions,
) -> Result<AffinePlan> {
    if w.len() != p * q || b.len() != p {
        return Err(Error::Compile(format!(
            "dense layer {p}x{q} needs {} weights and {p} biases, got {} and {}",
            p * q,
            w.len(),
            b.len()
        )));
    }
    cfg.validate(q)?;
    check_rounding(opts)?;
    let in_fmt = cfg.input_format;
    let layout = pass_layout(in_fmt, cfg.bit_mode)?;
    let signed_fixed = in_fmt.as_fixed().is_some_and(|f| f.is_signed());
    if opts.bias == BiasMode::PerTable && (layout.passes.len() > 1 || signed_fixed) {
        return Err(Error::Compile(
            "per-table bias needs a single-pass whole-word plan over an unsigned or float input".into(),
        ));
    }
    let one_bit = cfg
        .chunks
        .iter()
        .filter(|c| cfg.bit_mode == BitMode::WholeWord && c.len() as u32 * layout.slot_bits == 1)
        .count();
    if one_bit > 0 {
        log::debug!("{one_bit} chunks index a single bit each");
    }

    let snapped = snap_weights(w, opts.weight_bits)?;
    let acc_exp = snapped.exp + in_fmt.unit_exp();
    let bias = snap_bias(b, acc_exp)?;
    let k = cfg.k();

    let (acc_init, shares) = match opts.bias {
        BiasMode::AccumulatorInit => (bias, vec![Vec::new(); k]),
        BiasMode::PerTable => {
            // exact integer split: the shares of each output sum to its bias
            let shares = (0..k)
                .map(|i| {
                    bias.iter()
                        .map(|&bo| {
                            let (d, r) = (bo.div_euclid(k as i128), bo.rem_euclid(k as i128));
                            (d + ((i as i128) < r) as i128) as i64
                        })
                        .collect()
                })
                .collect();
            (vec![0; p], shares)
        }
    };

    let jobs: Vec<TableJob> = cfg
        .chunks
        .iter()
        .zip(shares)
        .map(|(chunk, base)| TableJob {
            index_bits: chunk.len() as u32 * layout.slot_bits,
            entry_shape: vec![p],
            slots: chunk
                .iter()
                .map(|&col| (0..p).map(|o| (o, snapped.ints[o * q + col])).collect())
                .collect(),
            base,
        })
        .collect();

    let mut bank = LutBank::new();
    let mut physical = Vec::with_capacity(k);
    if !opts.cost_only {
        for lut in tabulate_jobs(&jobs, &layout, opts)? {
            physical.push(bank.add_table(lut));
        }
    }

    let mut passes = Vec::with_capacity(layout.passes.len());
    for &(field, shift) in &layout.passes {
        let mut steps = Vec::with_capacity(k);
        for c in 0..k {
            let table = if opts.cost_only {
                c as u32
            } else {
                bank.add_logical(physical[c])?
            };
            steps.push(Step {
                table,
                gather: c as u32,
                scatter: 0,
            });
        }
        passes.push(Pass {
            field,
            slot_bits: layout.slot_bits,
            shift,
            subtract: false,
            steps,
        });
    }

    let plan = AffinePlan {
        geometry: Geometry::Dense {
            p,
            q,
            chunks: cfg.chunks.clone(),
        },
        input_format: in_fmt,
        output_format: opts.output_format,
        bit_mode: cfg.bit_mode,
        bias_mode: opts.bias,
        rounding: opts.rounding,
        in_len: q,
        out_len: p,
        bank,
        gathers: cfg
            .chunks
            .iter()
            .map(|c| c.iter().map(|&i| i as u32).collect())
            .collect(),
        scatters: vec![vec![Segment {
            entry_off: 0,
            out_off: 0,
            len: p as u32,
        }]],
        passes,
        acc_init,
        acc_exp,
        weight_exp: snapped.exp,
        weight_bits: opts.weight_bits,
        cost_only: opts.cost_only,
    };
    match in_fmt.as_fixed() {
        Some(f) if f.is_signed() => compile_signed(plan, f.bits()),
        _ => Ok(plan),
    }
}

/// Adds the sign path for `n`-bit two's-complement inputs: the MSB of every
/// element is routed through the existing tables, shifted left by `n-1` and
/// subtracted. Idempotent.
pub fn compile_signed(mut plan: AffinePlan, n: u32) -> Result<AffinePlan> {
    let f = plan
        .input_format
        .as_fixed()
        .filter(|f| f.is_signed())
        .ok_or_else(|| {
            Error::Contract(format!(
                "sign path needs a signed fixed-point input, plan input is {}",
                plan.input_format
            ))
        })?;
    if f.bits() != n {
        return Err(Error::Contract(format!(
            "plan input has {} bits, sign path requested for {n}",
            f.bits()
        )));
    }
    if plan.bias_mode == BiasMode::PerTable {
        return Err(Error::Contract(
            "per-table bias would be subtracted again by the sign pass".into(),
        ));
    }
    if plan.is_signed_path() {
        return Ok(plan);
    }
    let sign_field = Field::Bits {
        shift: n - 1,
        mask: 1,
    };
    if let [only] = plan.passes.as_mut_slice() {
        if matches!(only.field, Field::Bits { mask: 0, .. }) {
            only.field = sign_field;
            only.shift = n - 1;
            only.subtract = true;
            return Ok(plan);
        }
    }
    let first = plan
        .passes
        .first()
        .ok_or_else(|| Error::Contract("plan has no passes".into()))?;
    let slot_bits = first.slot_bits;
    let template = first.steps.clone();
    // one new logical table per logical table of the first pass
    let mut renamed = std::collections::BTreeMap::new();
    let mut steps = Vec::with_capacity(template.len());
    for s in template {
        let table = if plan.cost_only {
            s.table
        } else if let Some(&t) = renamed.get(&s.table) {
            t
        } else {
            let phys = plan.bank.physical_id(s.table).expect("step table exists");
            let t = plan.bank.add_logical(phys)?;
            renamed.insert(s.table, t);
            t
        };
        steps.push(Step { table, ..s });
    }
    plan.passes.push(Pass {
        field: sign_field,
        slot_bits,
        shift: n - 1,
        subtract: true,
        steps,
    });
    Ok(plan)
}

/// Index slot width per element and number of passes (including the sign
/// pass of signed fixed-point inputs).
pub fn pass_count(fmt: NumericFormat, mode: BitMode) -> Result<(u32, u32)> {
    let layout = pass_layout(fmt, mode)?;
    let sign = fmt.as_fixed().is_some_and(|f| f.is_signed()) as u32;
    let magnitude = layout
        .passes
        .iter()
        .filter(|(f, _)| !matches!(f, Field::Bits { mask: 0, .. }))
        .count() as u32;
    Ok((layout.slot_bits, magnitude + sign))
}
