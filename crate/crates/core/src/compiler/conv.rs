use super::dense::{check_rounding, compile_signed, pass_layout, snap_bias, tabulate_jobs, LayerOptions, TableJob};
use super::plan::*;
use crate::error::{Error, Result};
use crate::formats::{snap_weights, NumericFormat};
use crate::lut::LutBank;

/// Shape of a stride-1 "same" convolution over an `h x w x cin` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    /// Odd kernel side.
    pub k: usize,
}

impl ConvShape {
    pub fn radius(&self) -> usize {
        self.k / 2
    }
}

/// Compiles a convolution with an HWIO `kernel`. Each input channel gets one
/// shared table indexed by an `block x block` input patch; its entry is the
/// patch convolved with the kernel over the dilated `(block + 2r)^2` support,
/// laid out `[u][v][cout]`. Edge blocks are zero padded.
pub fn compile_conv2d(
    kernel: &[f32],
    bias: &[f32],
    shape: ConvShape,
    block: usize,
    bit_mode: BitMode,
    input_format: NumericFormat,
    opts: &LayerOptions,
) -> Result<AffinePlan> {
    let ConvShape { h, w, cin, cout, k } = shape;
    if k % 2 == 0 || k == 0 {
        return Err(Error::Compile(format!("kernel side must be odd, got {k}")));
    }
    if kernel.len() != k * k * cin * cout || bias.len() != cout {
        return Err(Error::Compile(format!(
            "conv {k}x{k}x{cin}x{cout} needs {} weights and {cout} biases, got {} and {}",
            k * k * cin * cout,
            kernel.len(),
            bias.len()
        )));
    }
    if block == 0 || h == 0 || w == 0 {
        return Err(Error::Compile("empty image or zero block size".into()));
    }
    if opts.bias == BiasMode::PerTable {
        return Err(Error::Compile(
            "per-table bias is not available for convolutions (halos overlap)".into(),
        ));
    }
    check_rounding(opts)?;
    let layout = pass_layout(input_format, bit_mode)?;
    let r = shape.radius();
    let side = block + 2 * r;
    let snapped = snap_weights(kernel, opts.weight_bits)?;
    let acc_exp = snapped.exp + input_format.unit_exp();
    let bias = snap_bias(bias, acc_exp)?;
    let kidx = |dy: usize, dx: usize, ci: usize, co: usize| ((dy * k + dx) * cin + ci) * cout + co;

    // entry[u][v][co] += K[py - u + 2r][px - v + 2r][ci][co] * value(py, px)
    let jobs: Vec<TableJob> = (0..cin)
        .map(|ci| TableJob {
            index_bits: (block * block) as u32 * layout.slot_bits,
            entry_shape: vec![side, side, cout],
            slots: (0..block * block)
                .map(|pix| {
                    let (py, px) = (pix / block, pix % block);
                    let mut taps = Vec::with_capacity(k * k * cout);
                    for dy in 0..k {
                        for dx in 0..k {
                            let (u, v) = (py + 2 * r - dy, px + 2 * r - dx);
                            for co in 0..cout {
                                let wv = snapped.ints[kidx(dy, dx, ci, co)];
                                if wv != 0 {
                                    taps.push(((u * side + v) * cout + co, wv));
                                }
                            }
                        }
                    }
                    taps
                })
                .collect(),
            base: Vec::new(),
        })
        .collect();

    let mut bank = LutBank::new();
    let mut physical = Vec::new();
    if !opts.cost_only {
        for lut in tabulate_jobs(&jobs, &layout, opts)? {
            physical.push(bank.add_table(lut));
        }
    }

    let in_len = h * w * cin;
    let (nby, nbx) = (h.div_ceil(block), w.div_ceil(block));
    let mut gathers = Vec::with_capacity(nby * nbx * cin);
    let mut scatters = Vec::with_capacity(nby * nbx);
    for by in 0..nby {
        for bx in 0..nbx {
            for ci in 0..cin {
                let mut g = Vec::with_capacity(block * block);
                for py in 0..block {
                    for px in 0..block {
                        let (y, x) = (by * block + py, bx * block + px);
                        g.push(if y < h && x < w {
                            ((y * w + x) * cin + ci) as u32
                        } else {
                            in_len as u32
                        });
                    }
                }
                gathers.push(g);
            }
            // output rows of the dilated block, clipped to the image
            let mut segs = Vec::new();
            for u in 0..side {
                let y = (by * block + u) as isize - r as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                let x0 = (bx * block) as isize - r as isize;
                let v_lo = (-x0).max(0) as usize;
                let v_hi = ((w as isize - x0).min(side as isize)).max(0) as usize;
                if v_lo >= v_hi {
                    continue;
                }
                segs.push(Segment {
                    entry_off: ((u * side + v_lo) * cout) as u32,
                    out_off: ((y as usize * w + (x0 + v_lo as isize) as usize) * cout) as u32,
                    len: ((v_hi - v_lo) * cout) as u32,
                });
            }
            scatters.push(segs);
        }
    }

    let mut passes = Vec::with_capacity(layout.passes.len());
    for &(field, shift) in &layout.passes {
        let tables: Vec<u32> = (0..cin)
            .map(|ci| {
                if opts.cost_only {
                    Ok(ci as u32)
                } else {
                    bank.add_logical(physical[ci])
                }
            })
            .collect::<Result<_>>()?;
        let mut steps = Vec::with_capacity(nby * nbx * cin);
        for b in 0..nby * nbx {
            for (ci, &table) in tables.iter().enumerate() {
                steps.push(Step {
                    table,
                    gather: (b * cin + ci) as u32,
                    scatter: b as u32,
                });
            }
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
        geometry: Geometry::Conv {
            h,
            w,
            cin,
            cout,
            k,
            block,
        },
        input_format,
        output_format: opts.output_format,
        bit_mode,
        bias_mode: opts.bias,
        rounding: opts.rounding,
        in_len,
        out_len: h * w * cout,
        bank,
        gathers,
        scatters,
        passes,
        acc_init: (0..h * w).flat_map(|_| bias.iter().copied()).collect(),
        acc_exp,
        weight_exp: snapped.exp,
        weight_bits: opts.weight_bits,
        cost_only: opts.cost_only,
    };
    match input_format.as_fixed() {
        Some(f) if f.is_signed() => compile_signed(plan, f.bits()),
        _ => Ok(plan),
    }
}
