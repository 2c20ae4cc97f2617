//! Analytic table sizes and operation counts, for configurations of any size.
//!
//! Shift-add conventions: C1 counts `k - 1` vector additions per pass (the
//! first lookup of a pass initializes its outputs), C2 counts `k` per pass.
//! Sizes use `r_O`-bit entry elements and binary units (KiB = 2^10 bytes).

use std::fmt::Write as _;
use std::ops::Add;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::compiler::{pass_count, BitMode};
use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::formats::{FixedFormat, NumericFormat};
use crate::lut::Caps;
use crate::modelio::{LayerKind, WeightContainer};

pub use crate::engine::rounder::rounder_size_bits as cost_stochastic_rounder;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_lut_bits: BigUint,
    pub physical_tables: u64,
    pub logical_tables: u64,
    pub lut_evals: u64,
    pub shift_adds_c1: u64,
    pub shift_adds_c2: u64,
    pub reference_macs: u64,
    /// Widest table index in the configuration.
    pub max_index_bits: u32,
}

impl Default for CostReport {
    fn default() -> Self {
        CostReport {
            total_lut_bits: BigUint::zero(),
            physical_tables: 0,
            logical_tables: 0,
            lut_evals: 0,
            shift_adds_c1: 0,
            shift_adds_c2: 0,
            reference_macs: 0,
            max_index_bits: 0,
        }
    }
}

impl Add for CostReport {
    type Output = CostReport;

    fn add(self, o: CostReport) -> CostReport {
        CostReport {
            total_lut_bits: self.total_lut_bits + o.total_lut_bits,
            physical_tables: self.physical_tables + o.physical_tables,
            logical_tables: self.logical_tables + o.logical_tables,
            lut_evals: self.lut_evals + o.lut_evals,
            shift_adds_c1: self.shift_adds_c1 + o.shift_adds_c1,
            shift_adds_c2: self.shift_adds_c2 + o.shift_adds_c2,
            reference_macs: self.reference_macs + o.reference_macs,
            max_index_bits: self.max_index_bits.max(o.max_index_bits),
        }
    }
}

impl std::iter::Sum for CostReport {
    fn sum<I: Iterator<Item = CostReport>>(iter: I) -> Self {
        iter.fold(CostReport::default(), Add::add)
    }
}

impl CostReport {
    pub fn total_bits_f64(&self) -> f64 {
        self.total_lut_bits.to_f64().unwrap_or(f64::INFINITY)
    }

    pub fn total_bytes(&self) -> f64 {
        self.total_bits_f64() / 8.0
    }

    /// Within the index-width and total-size caps.
    pub fn materializable(&self, caps: &Caps) -> bool {
        self.max_index_bits <= caps.max_index_bits
            && self.total_lut_bits <= BigUint::from(caps.max_bank_bits)
    }

    pub fn human_size(&self) -> String {
        human_bytes(self.total_bytes())
    }
}

/// Binary-unit size of a byte count, one decimal.
pub fn human_bytes(bytes: f64) -> String {
    const UNITS: [&str; 5] = ["B", "KiB", "MiB", "GiB", "TiB"];
    let mut v = bytes;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    if u == 0 {
        format!("{v} B")
    } else {
        format!("{v:.1} {}", UNITS[u])
    }
}

pub fn human_bits(bits: u128) -> String {
    human_bytes(bits as f64 / 8.0)
}

/// Slot width per element and pass count for an input format and bit mode.
pub fn slot_layout(fmt: NumericFormat, mode: BitMode) -> Result<(u32, u64)> {
    let (slot, passes) = pass_count(fmt, mode)?;
    Ok((slot, passes as u64))
}

fn pow2(bits: u32) -> BigUint {
    BigUint::from(1u8) << bits
}

/// Dense `p x q` layer with the given chunk sizes.
pub fn cost_dense(
    p: usize,
    q: usize,
    chunk_sizes: &[usize],
    fmt: NumericFormat,
    mode: BitMode,
    r_o: u32,
) -> Result<CostReport> {
    if chunk_sizes.iter().sum::<usize>() != q || chunk_sizes.contains(&0) {
        return Err(Error::Domain(format!(
            "chunk sizes {chunk_sizes:?} do not partition {q} inputs"
        )));
    }
    let (slot, passes) = slot_layout(fmt, mode)?;
    let k = chunk_sizes.len() as u64;
    let (p64, q64) = (p as u64, q as u64);
    let entry = BigUint::from(p64) * r_o;
    let total = chunk_sizes
        .iter()
        .map(|&m| pow2(m as u32 * slot) * &entry)
        .sum();
    Ok(CostReport {
        total_lut_bits: total,
        physical_tables: k,
        logical_tables: k * passes,
        lut_evals: k * passes,
        shift_adds_c1: passes * k.saturating_sub(1) * p64,
        shift_adds_c2: passes * k * p64,
        reference_macs: p64 * q64,
        max_index_bits: chunk_sizes.iter().map(|&m| m as u32 * slot).max().unwrap_or(0),
    })
}

/// Convolution geometry for costing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

/// Convolution with `block x block` input patches: one shared table per input
/// channel of `2^(a * slot)` entries of `c * cout` elements, `a = block^2`,
/// `c = (block + 2r)^2`.
pub fn cost_conv(g: ConvGeometry, block: usize, fmt: NumericFormat, mode: BitMode, r_o: u32) -> Result<CostReport> {
    let ConvGeometry { h, w, cin, cout, k } = g;
    if block == 0 || k % 2 == 0 {
        return Err(Error::Domain("block must be positive and the kernel side odd".into()));
    }
    let (slot, passes) = slot_layout(fmt, mode)?;
    let r = k / 2;
    let side = block + 2 * r;
    let index_bits = (block * block) as u32 * slot;
    let per_table = pow2(index_bits) * BigUint::from((side * side * cout) as u64) * r_o;
    let (nby, nbx) = (h.div_ceil(block), w.div_ceil(block));
    // in-image cells of every dilated block
    let span = |n: usize, nb: usize| -> u64 {
        (0..nb)
            .map(|b| {
                let lo = (b * block) as isize - r as isize;
                let hi = lo + side as isize;
                (hi.min(n as isize) - lo.max(0)).max(0) as u64
            })
            .sum()
    };
    let cells = span(h, nby) * span(w, nbx);
    let c2 = passes * cin as u64 * cells * cout as u64;
    Ok(CostReport {
        total_lut_bits: per_table * cin as u64,
        physical_tables: cin as u64,
        logical_tables: cin as u64 * passes,
        lut_evals: (nby * nbx * cin) as u64 * passes,
        shift_adds_c1: c2 - passes * (h * w * cout) as u64,
        shift_adds_c2: c2,
        reference_macs: (h * w * k * k * cin * cout) as u64,
        max_index_bits: index_bits,
    })
}

/// An affine layer as seen by the cost model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchLayerKind {
    Dense { p: usize, q: usize },
    Conv(ConvGeometry),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchLayer {
    pub name: String,
    pub kind: ArchLayerKind,
    pub input_format: NumericFormat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub name: String,
    pub layers: Vec<ArchLayer>,
}

fn u(bits: u32) -> NumericFormat {
    NumericFormat::Fixed(FixedFormat::unsigned(bits))
}

fn half_nonneg() -> NumericFormat {
    NumericFormat::binary16().nonnegative()
}

impl Arch {
    /// 784 -> 10 on 3-bit pixels.
    pub fn linear() -> Arch {
        Arch {
            name: "linear".into(),
            layers: vec![ArchLayer {
                name: "dense".into(),
                kind: ArchLayerKind::Dense { p: 10, q: 784 },
                input_format: u(3),
            }],
        }
    }

    /// 784 -> 1024 -> 512 -> 10; 8-bit pixels, nonnegative half floats after ReLU.
    pub fn mlp() -> Arch {
        let dense = |name: &str, q, p, f| ArchLayer {
            name: name.into(),
            kind: ArchLayerKind::Dense { p, q },
            input_format: f,
        };
        Arch {
            name: "mlp".into(),
            layers: vec![
                dense("dense_1", 784, 1024, u(8)),
                dense("dense_2", 1024, 512, half_nonneg()),
                dense("dense_3", 512, 10, half_nonneg()),
            ],
        }
    }

    /// conv5x5(1->32) pool conv5x5(32->64) pool dense(3136->1024) dense(1024->10).
    pub fn lenet() -> Arch {
        let conv = |name: &str, hw, cin, cout, f| ArchLayer {
            name: name.into(),
            kind: ArchLayerKind::Conv(ConvGeometry {
                h: hw,
                w: hw,
                cin,
                cout,
                k: 5,
            }),
            input_format: f,
        };
        let dense = |name: &str, q, p| ArchLayer {
            name: name.into(),
            kind: ArchLayerKind::Dense { p, q },
            input_format: half_nonneg(),
        };
        Arch {
            name: "lenet".into(),
            layers: vec![
                conv("conv_1", 28, 1, 32, u(8)),
                conv("conv_2", 14, 32, 64, half_nonneg()),
                dense("dense_1", 3136, 1024),
                dense("dense_2", 1024, 10),
            ],
        }
    }

    pub fn builtin(name: &str) -> Result<Arch> {
        match name {
            "linear" => Ok(Self::linear()),
            "mlp" => Ok(Self::mlp()),
            "lenet" | "cnn" => Ok(Self::lenet()),
            _ => Err(Error::Config(format!("unknown architecture '{name}' (linear, mlp, lenet)"))),
        }
    }

    /// Affine layers of a container. The first layer reads `input_format`;
    /// later layers read nonnegative half floats after ReLU, else half floats.
    pub fn from_container(c: &WeightContainer, input_format: NumericFormat) -> Result<Arch> {
        let mut shape = c.manifest.input_shape.clone();
        let mut fmt = input_format;
        let mut layers = Vec::new();
        for l in &c.layers {
            let out = l.output_shape(&shape)?;
            match l.kind {
                LayerKind::Dense => layers.push(ArchLayer {
                    name: l.name.clone(),
                    kind: ArchLayerKind::Dense {
                        p: l.dims[0],
                        q: l.dims[1],
                    },
                    input_format: fmt,
                }),
                LayerKind::Conv2d => layers.push(ArchLayer {
                    name: l.name.clone(),
                    kind: ArchLayerKind::Conv(ConvGeometry {
                        h: shape[0],
                        w: shape[1],
                        cin: l.dims[2],
                        cout: l.dims[3],
                        k: l.dims[0],
                    }),
                    input_format: fmt,
                }),
                LayerKind::MaxPool => {}
            }
            if l.kind != LayerKind::MaxPool {
                fmt = match l.activation {
                    Some(crate::compiler::ActivationKind::Relu) => half_nonneg(),
                    _ => NumericFormat::binary16(),
                };
            }
            shape = out;
        }
        Ok(Arch {
            name: c.manifest.arch.clone(),
            layers,
        })
    }

    pub fn reference_macs(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| match l.kind {
                ArchLayerKind::Dense { p, q } => (p * q) as u64,
                ArchLayerKind::Conv(g) => (g.h * g.w * g.k * g.k * g.cin * g.cout) as u64,
            })
            .sum()
    }
}

/// One uniform configuration applied to every layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub chunk: usize,
    pub mode: BitMode,
    pub block: usize,
}

impl SweepPoint {
    pub fn id(&self, with_block: bool) -> String {
        let mut s = format!("c{}_{}", self.chunk, self.mode);
        if with_block {
            write!(s, "_b{}", self.block).unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub chunks: Vec<usize>,
    pub modes: Vec<BitMode>,
    pub blocks: Vec<usize>,
}

impl SweepGrid {
    pub fn default_grid() -> SweepGrid {
        SweepGrid {
            chunks: vec![1, 2, 4, 7, 14, 28],
            modes: vec![BitMode::Bitplane, BitMode::WholeWord],
            blocks: vec![1, 2, 4],
        }
    }

    pub fn single(chunk: usize, mode: BitMode, block: usize) -> SweepGrid {
        SweepGrid {
            chunks: vec![chunk],
            modes: vec![mode],
            blocks: vec![block],
        }
    }

    fn points(&self, has_conv: bool) -> Vec<SweepPoint> {
        let blocks: &[usize] = if has_conv { &self.blocks } else { &[1] };
        let mut pts = Vec::new();
        for &chunk in &self.chunks {
            for &mode in &self.modes {
                for &block in blocks {
                    pts.push(SweepPoint { chunk, mode, block });
                }
            }
        }
        pts
    }
}

/// Chunk sizes for consecutive chunks of `size` over `q` elements.
pub fn uniform_chunks(q: usize, size: usize) -> Vec<usize> {
    let size = size.max(1);
    (0..q).step_by(size).map(|s| size.min(q - s)).collect()
}

/// `"56x14"`, or `"146x7+1x2"` when the last chunk is shorter.
pub fn chunk_label(sizes: &[usize]) -> String {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    for &s in sizes {
        match groups.last_mut() {
            Some((n, m)) if *m == s => *n += 1,
            _ => groups.push((1, s)),
        }
    }
    groups
        .iter()
        .map(|(n, m)| format!("{n}x{m}"))
        .collect::<Vec<_>>()
        .join("+")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub chunk_sizes: String,
    pub report: CostReport,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config_id: String,
    pub point: SweepPoint,
    pub layers: Vec<LayerCost>,
    pub total: CostReport,
    pub materializable: bool,
    pub dominated: bool,
}

pub fn cost_arch(arch: &Arch, point: SweepPoint, r_o: u32) -> Result<Vec<LayerCost>> {
    arch.layers
        .iter()
        .map(|l| {
            let (label, report) = match l.kind {
                ArchLayerKind::Dense { p, q } => {
                    let sizes = uniform_chunks(q, point.chunk);
                    (chunk_label(&sizes), cost_dense(p, q, &sizes, l.input_format, point.mode, r_o)?)
                }
                ArchLayerKind::Conv(g) => (
                    format!("block{}", point.block),
                    cost_conv(g, point.block, l.input_format, point.mode, r_o)?,
                ),
            };
            Ok(LayerCost {
                layer: l.name.clone(),
                chunk_sizes: label,
                report,
            })
        })
        .collect()
}

/// Costs every grid point, sorted by total size (then C1 adds, then id),
/// with Pareto-dominated points (size vs C1 adds) flagged. Grid points that
/// a layer cannot use (e.g. a group size not dividing the planes) are skipped.
pub fn sweep(arch: &Arch, grid: &SweepGrid, r_o: u32, caps: &Caps, policy: ExecPolicy) -> Result<Vec<SweepResult>> {
    let has_conv = arch.layers.iter().any(|l| matches!(l.kind, ArchLayerKind::Conv(_)));
    let points = grid.points(has_conv);
    if points.is_empty() {
        return Err(Error::Domain("empty sweep grid".into()));
    }
    let mut results: Vec<SweepResult> = exec::map_slice(policy, &points, |&pt| {
        cost_arch(arch, pt, r_o).ok().map(|layers| {
            let total: CostReport = layers.iter().map(|l| l.report.clone()).sum();
            SweepResult {
                config_id: pt.id(has_conv),
                point: pt,
                materializable: total.materializable(caps),
                layers,
                total,
                dominated: false,
            }
        })
    })
    .into_iter()
    .flatten()
    .collect();
    results.sort_by(|a, b| {
        (&a.total.total_lut_bits, a.total.shift_adds_c1, &a.config_id)
            .cmp(&(&b.total.total_lut_bits, b.total.shift_adds_c1, &b.config_id))
    });
    let keys: Vec<(BigUint, u64)> = results
        .iter()
        .map(|r| (r.total.total_lut_bits.clone(), r.total.shift_adds_c1))
        .collect();
    for (i, r) in results.iter_mut().enumerate() {
        let (bi, ai) = &keys[i];
        r.dominated = keys
            .iter()
            .enumerate()
            .any(|(j, (bj, aj))| j != i && bj <= bi && aj <= ai && (bj < bi || aj < ai));
    }
    Ok(results)
}

pub const SWEEP_HEADER: [&str; 12] = [
    "config_id",
    "layer",
    "chunk_sizes",
    "bit_mode",
    "total_lut_bits",
    "lut_evals",
    "shift_adds_c1",
    "shift_adds_c2",
    "reference_macs",
    "materializable",
    "total_lut_size",
    "dominated",
];

/// Per-layer rows followed by a `total` row for every configuration.
pub fn write_sweep_csv<W: std::io::Write>(results: &[SweepResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for r in results {
        let rows = r
            .layers
            .iter()
            .map(|l| (l.layer.as_str(), l.chunk_sizes.as_str(), &l.report))
            .chain(std::iter::once(("total", "", &r.total)));
        for (layer, chunks, rep) in rows {
            w.write_record([
                r.config_id.clone(),
                layer.to_string(),
                chunks.to_string(),
                r.point.mode.to_string(),
                rep.total_lut_bits.to_string(),
                rep.lut_evals.to_string(),
                rep.shift_adds_c1.to_string(),
                rep.shift_adds_c2.to_string(),
                rep.reference_macs.to_string(),
                r.materializable.to_string(),
                rep.human_size(),
                r.dominated.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
