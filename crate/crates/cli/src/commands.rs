//! Subcommand implementations. Everything machine-readable is CSV on stdout.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, ValueEnum};
use lutnet::compiler::{
    compile_network, network_costs, BitMode, LayerOp, NetworkOptions, NetworkPlan, OutputRounding, PlanConfig,
};
use lutnet::costs::{self, Arch, CostReport, SweepGrid};
use lutnet::engine::{argmax, Engine, OpTally};
use lutnet::formats::NumericFormat;
use lutnet::lut::Caps;
use lutnet::modelio::{
    load_plan, load_split, parse_idx_images, pixel_codes, read_idx, save_plan, IdxDataset, LayerKind, Split,
    WeightContainer,
};
use lutnet::oracle::{accuracy, predict_reference, Oracle};
use lutnet::trainer::{dataset_codes, train_linear, TrainConfig, DEFAULT_TRAIN_SEED};
use lutnet::ExecPolicy;

use crate::plan_args::PlanArgs;
use crate::Usage;

fn policy(sequential: bool) -> ExecPolicy {
    if sequential {
        ExecPolicy::Sequential
    } else {
        ExecPolicy::Parallel
    }
}

fn stdout_csv() -> csv::Writer<io::StdoutLock<'static>> {
    csv::Writer::from_writer(io::stdout().lock())
}

fn load_container(path: &Path) -> Result<WeightContainer> {
    WeightContainer::load(path).with_context(|| format!("reading weights {}", path.display()))
}

/// `name` is a directory holding the four IDX files, or a dataset name under
/// the data root.
fn load_dataset(root: &Path, name: &str, split: Split) -> Result<IdxDataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let dir = Path::new(name);
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let data = if images.exists() && labels.exists() {
        read_idx(&images, &labels)
    } else {
        load_split(root, name, split)
    };
    data.with_context(|| format!("loading dataset '{name}'"))
}

/// (name, is convolution) of every affine layer.
fn affine_layers(c: &WeightContainer) -> Vec<(String, bool)> {
    c.layers
        .iter()
        .filter(|l| l.kind != LayerKind::MaxPool)
        .map(|l| (l.name.clone(), l.kind == LayerKind::Conv2d))
        .collect()
}

fn rounding_seed(plan: &NetworkPlan) -> Option<u64> {
    plan.layers.iter().find_map(|l| match l.affine()?.rounding {
        OutputRounding::Stochastic { seed, .. } => Some(seed),
        OutputRounding::NearestEven => None,
    })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn shape_label(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

// ---- train ----

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `mnist`, `fashion`, or a directory with the IDX files.
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    /// Input quantization width.
    #[arg(long, default_value_t = 3)]
    pub bits: u32,
    #[arg(long, default_value_t = 50_000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f32,
    #[arg(long, default_value_t = DEFAULT_TRAIN_SEED)]
    pub seed: u64,
    /// Output weight container.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "LUTNET_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub sequential: bool,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let data = load_dataset(&a.data_dir, &a.dataset, Split::Train)?;
    let cfg = TrainConfig {
        episodes: a.episodes,
        batch: a.batch,
        input_bits: a.bits,
        learning_rate: a.learning_rate,
        seed: a.seed,
        policy: policy(a.sequential),
        ..TrainConfig::default()
    };
    log::info!("training on {} samples of {}", data.len(), a.dataset);
    let (container, report) = train_linear(&data, &cfg)?;
    container
        .save(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let mut w = stdout_csv();
    w.write_record(["key", "value"])?;
    for (k, v) in [
        ("dataset", a.dataset.clone()),
        ("bits", a.bits.to_string()),
        ("episodes", report.episodes.to_string()),
        ("batch", a.batch.to_string()),
        ("seed", report.seed.to_string()),
        ("final_loss", format!("{:.6}", report.final_loss)),
        ("out", a.out.display().to_string()),
    ] {
        w.write_record([k, v.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

// ---- compile ----

#[derive(Args, Debug)]
pub struct CompileArgs {
    /// Weight container (LNW1).
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Where to write the plan image.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for one LUT1 file per physical table.
    #[arg(long)]
    pub emit_tables: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

const COMPILE_HEADER: [&str; 14] = [
    "layer",
    "kind",
    "physical_tables",
    "logical_tables",
    "max_index_bits",
    "lut_evals",
    "shift_adds_c1",
    "shift_adds_c2",
    "reference_macs",
    "nominal_lut_bits",
    "nominal_lut_size",
    "stored_lut_bits",
    "stored_lut_size",
    "rounding_seed",
];

fn cost_row(name: &str, kind: &str, c: Option<&CostReport>, stored: Option<u128>, seed: Option<u64>) -> Vec<String> {
    let mut row = vec![name.to_string(), kind.to_string()];
    match c {
        Some(c) => row.extend([
            c.physical_tables.to_string(),
            c.logical_tables.to_string(),
            c.max_index_bits.to_string(),
            c.lut_evals.to_string(),
            c.shift_adds_c1.to_string(),
            c.shift_adds_c2.to_string(),
            c.reference_macs.to_string(),
            c.total_lut_bits.to_string(),
            c.human_size(),
        ]),
        None => row.extend(std::iter::repeat_n(String::new(), 9)),
    }
    row.push(opt(stored));
    row.push(stored.map(costs::human_bits).unwrap_or_default());
    row.push(opt(seed));
    row
}

fn options(args: &PlanArgs, sequential: bool) -> NetworkOptions {
    NetworkOptions {
        policy: policy(sequential),
        cost_only: args.cost_only,
        nominal_entry_bits: args.entry_bits.unwrap_or(16),
        ..NetworkOptions::default()
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

fn emit_tables(plan: &NetworkPlan, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut n = 0;
    for l in &plan.layers {
        let tables = match &l.op {
            LayerOp::Affine(a) => a.bank.tables().iter().collect::<Vec<_>>(),
            LayerOp::Table { lut } => vec![lut],
            _ => continue,
        };
        for (i, t) in tables.into_iter().enumerate() {
            let path = dir.join(format!("{}_{i}.lut", sanitize(&l.name)));
            let mut f = io::BufWriter::new(fs::File::create(&path)?);
            t.write_image(&mut f)?;
            n += 1;
        }
    }
    Ok(n)
}

pub fn compile(a: CompileArgs) -> Result<()> {
    let container = load_container(&a.weights)?;
    let cfg = a.plan.resolve(&affine_layers(&container))?;
    let opts = options(&a.plan, a.sequential);
    let reports = network_costs(&container, &cfg, &opts)?;
    let plan = compile_network(&container, &cfg, &opts)?;
    if let Some(out) = &a.out {
        save_plan(&plan, out).with_context(|| format!("writing {}", out.display()))?;
    }
    if let Some(dir) = &a.emit_tables {
        if !plan.is_runnable() {
            return Err(Usage("--emit-tables needs materialized tables (drop --cost-only)".into()).into());
        }
        let n = emit_tables(&plan, dir)?;
        log::info!("wrote {n} tables to {}", dir.display());
    }

    let mut w = stdout_csv();
    w.write_record(COMPILE_HEADER)?;
    for l in &plan.layers {
        let cost = reports.iter().find(|(n, _)| n == &l.name).map(|(_, c)| c);
        let (stored, seed) = match &l.op {
            LayerOp::Affine(af) => {
                let seed = match af.rounding {
                    OutputRounding::Stochastic { seed, .. } => Some(seed),
                    OutputRounding::NearestEven => None,
                };
                ((!af.cost_only).then(|| af.bank.size_bits()), seed)
            }
            LayerOp::Table { lut } => (Some(lut.size_bits()), None),
            _ => (None, None),
        };
        w.write_record(cost_row(&l.name, l.kind(), cost, stored, seed))?;
    }
    let total: CostReport = reports.into_iter().map(|(_, c)| c).sum();
    let stored = plan.is_runnable().then(|| plan.lut_bits());
    w.write_record(cost_row("total", "", Some(&total), stored, rounding_seed(&plan)))?;
    w.flush()?;
    Ok(())
}

// ---- run ----

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Compiled plan image.
    #[arg(long)]
    pub plan: PathBuf,
    /// IDX image file, binary PGM (P5), or raw 8-bit pixels.
    #[arg(long)]
    pub input: PathBuf,
    /// Image index within an IDX file.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Print the operation tally instead of the outputs.
    #[arg(long)]
    pub trace_ops: bool,
    /// Overrides the stochastic rounding seed of the plan.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_pgm(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..pos])?;
        fields.push(tok.parse::<usize>().map_err(|_| anyhow!("malformed PGM header"))?);
    }
    let (w, h, max) = (fields[0], fields[1], fields[2]);
    if max == 0 || max > 255 {
        return Err(anyhow!("PGM maxval {max} unsupported (1..=255)"));
    }
    let data = bytes
        .get(pos + 1..pos + 1 + w * h)
        .ok_or_else(|| anyhow!("PGM data shorter than {w}x{h}"))?;
    Ok(data
        .iter()
        .map(|&p| ((p as usize * 255 + max / 2) / max).min(255) as u8)
        .collect())
}

fn read_pixels(path: &Path, index: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(&[0, 0, 8, 3]) {
        let (rows, cols, images) = parse_idx_images(&bytes)?;
        let n = rows * cols;
        let count = images.len() / n.max(1);
        if index >= count {
            return Err(anyhow!("image index {index} out of range ({count} images)"));
        }
        return Ok(images[index * n..(index + 1) * n].to_vec());
    }
    if bytes.starts_with(b"P5") {
        return parse_pgm(&bytes);
    }
    Ok(bytes)
}

pub fn run(a: RunArgs) -> Result<()> {
    let plan = load_plan(&a.plan).with_context(|| format!("reading plan {}", a.plan.display()))?;
    let pixels = read_pixels(&a.input, a.index)?;
    if pixels.len() != plan.input_len() {
        return Err(anyhow!(
            "input has {} pixels, plan expects {}",
            pixels.len(),
            plan.input_len()
        ));
    }
    let x = pixel_codes(&pixels, plan.input_format);
    let engine = match a.seed {
        Some(s) => Engine::with_seed(&plan, s)?,
        None => Engine::new(&plan)?,
    };
    let seed = a.seed.or_else(|| rounding_seed(&plan));
    let (out, tallies) = engine.infer_traced(&x)?;
    let fmt = plan.output_format();
    let best = argmax(&out, fmt);
    let mut w = stdout_csv();
    if a.trace_ops {
        let t: OpTally = tallies.into_iter().fold(OpTally::default(), |acc, t| acc + t);
        w.write_record([
            "lut_evals",
            "scalar_lookups",
            "shift_adds_c1",
            "shift_adds_c2",
            "compares",
            "multiplies",
            "prediction",
            "seed",
        ])?;
        w.write_record([
            t.lut_evals.to_string(),
            t.scalar_lookups.to_string(),
            t.shift_adds_c1.to_string(),
            t.shift_adds_c2.to_string(),
            t.compares.to_string(),
            t.multiplies.to_string(),
            best.to_string(),
            opt(seed),
        ])?;
    } else {
        w.write_record(["element", "code", "value", "is_argmax", "seed"])?;
        for (i, &c) in out.iter().enumerate() {
            w.write_record([
                i.to_string(),
                c.to_string(),
                fmt.value(c).to_string(),
                (i == best).to_string(),
                opt(seed),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---- eval ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Via {
    /// Compiled tables on the multiplier-free engine.
    Plan,
    /// Quantized arithmetic reference.
    Oracle,
    /// Unquantized f32 forward pass on the quantized inputs.
    Reference,
    /// Plan and oracle, with their agreement.
    Both,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Precompiled plan; otherwise the weights are compiled with the flags below.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub plan_args: PlanArgs,
    /// `mnist`, `fashion`, or a directory with the IDX files.
    #[arg(long, default_value = "mnist")]
    pub dataset: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = Via::Plan)]
    pub via: Via,
    /// Evaluate only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, env = "LUTNET_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub sequential: bool,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let container = load_container(&a.weights)?;
    let mut data = load_dataset(&a.data_dir, &a.dataset, a.split.into())?;
    if let Some(n) = a.limit {
        data = data.take(n);
    }
    if data.is_empty() {
        return Err(anyhow!("dataset '{}' has no samples", a.dataset));
    }
    let pol = policy(a.sequential);
    let needs_tables = matches!(a.via, Via::Plan | Via::Both);
    let plan = match &a.plan {
        Some(p) => load_plan(p).with_context(|| format!("reading plan {}", p.display()))?,
        None => {
            let cfg = a.plan_args.resolve(&affine_layers(&container))?;
            let mut opts = options(&a.plan_args, a.sequential);
            opts.cost_only |= !needs_tables;
            compile_network(&container, &cfg, &opts)?
        }
    };
    let xs = dataset_codes(&data, plan.input_format);

    let mut results: Vec<(&str, Vec<usize>)> = Vec::new();
    if needs_tables {
        results.push(("plan", Engine::new(&plan)?.predict_batch(&xs, pol)?));
    }
    if matches!(a.via, Via::Oracle | Via::Both) {
        results.push(("oracle", Oracle::for_plan(&container, &plan)?.predict_batch(&xs, pol)?));
    }
    if a.via == Via::Reference {
        let fmt = plan.input_format;
        let preds = lutnet::exec::map_slice(pol, &xs, |x| {
            let v: Vec<f32> = x.iter().map(|&c| fmt.value(c) as f32).collect();
            predict_reference(&container, &v)
        })
        .into_iter()
        .collect::<lutnet::Result<Vec<_>>>()?;
        results.push(("reference", preds));
    }

    let classes = plan.output_shape().iter().product::<usize>().max(10);
    let mut w = stdout_csv();
    w.write_record(["metric", "true_label", "predicted_label", "value"])?;
    let mut row = |m: &str, t: String, p: String, v: String| w.write_record([m, &t, &p, &v]);
    row("dataset", String::new(), String::new(), a.dataset.clone())?;
    if let Some(s) = container.manifest.extra.get("train_seed") {
        row("train_seed", String::new(), String::new(), s.to_string())?;
    }
    if let Some(s) = rounding_seed(&plan) {
        row("rounding_seed", String::new(), String::new(), s.to_string())?;
    }
    row("samples", String::new(), String::new(), data.len().to_string())?;
    for (name, preds) in &results {
        let acc = accuracy(preds, &data.labels)?;
        row(&format!("accuracy_{name}"), String::new(), String::new(), format!("{acc:.6}"))?;
    }
    if results.len() == 2 {
        let same = results[0].1.iter().zip(&results[1].1).filter(|(a, b)| a == b).count();
        let agree = same as f64 / data.len() as f64;
        row("agreement_plan_oracle", String::new(), String::new(), format!("{agree:.6}"))?;
    }
    let (name, preds) = &results[0];
    let mut confusion = vec![0u64; classes * classes];
    for (&t, &p) in data.labels.iter().zip(preds) {
        confusion[t as usize * classes + p.min(classes - 1)] += 1;
    }
    for t in 0..classes {
        for p in 0..classes {
            row(&format!("confusion_{name}"), t.to_string(), p.to_string(), confusion[t * classes + p].to_string())?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---- sweep ----

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Built-in architecture: `linear`, `mlp` or `lenet`.
    #[arg(long, conflicts_with = "weights")]
    pub arch: Option<String>,
    /// Take the architecture from a weight container instead.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Network input format when sweeping a container.
    #[arg(long, requires = "weights")]
    pub input_format: Option<String>,
    /// `default`, or `<chunks>/<modes>[/<blocks>]` with comma-separated
    /// values, e.g. `1,14/bitplane,whole-word/1,2`.
    #[arg(long, default_value = "default")]
    pub grid: String,
    /// Table element width.
    #[arg(long, default_value_t = 16)]
    pub entry_bits: u32,
    #[arg(long)]
    pub sequential: bool,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Usage(format!("bad {what} '{v}' in --grid")).into())
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<SweepGrid> {
    if s == "default" {
        return Ok(SweepGrid::default_grid());
    }
    let parts: Vec<&str> = s.split('/').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(Usage(format!("--grid '{s}': expected default or <chunks>/<modes>[/<blocks>]")).into());
    }
    Ok(SweepGrid {
        chunks: parse_list(parts[0], "chunk size")?,
        modes: parse_list::<BitMode>(parts[1], "bit mode")?,
        blocks: match parts.get(2) {
            Some(b) => parse_list(b, "block")?,
            None => vec![1],
        },
    })
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let arch = match (&a.arch, &a.weights) {
        (Some(name), None) => Arch::builtin(name)?,
        (None, Some(path)) => {
            let c = load_container(path)?;
            let fmt = match &a.input_format {
                Some(f) => f.parse::<NumericFormat>()?,
                None => c.input_format()?.ok_or_else(|| {
                    Usage("container names no input format; pass --input-format".into())
                })?,
            };
            Arch::from_container(&c, fmt)?
        }
        _ => return Err(Usage("sweep needs --arch or --weights".into()).into()),
    };
    let grid = parse_grid(&a.grid)?;
    let results = costs::sweep(&arch, &grid, a.entry_bits, &Caps::default(), policy(a.sequential))?;
    costs::write_sweep_csv(&results, io::stdout().lock())?;
    Ok(())
}

// ---- inspect ----

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, conflicts_with = "weights")]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub plan_args: PlanArgs,
    /// Print the effective configuration (file plus flags) as TOML.
    #[arg(long)]
    pub show_config: bool,
}

fn print_config(cfg: &PlanConfig) -> Result<()> {
    print!("{}", cfg.to_toml()?);
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let container = a.weights.as_deref().map(load_container).transpose()?;
    if a.show_config {
        let layers = container.as_ref().map(affine_layers).unwrap_or_default();
        return print_config(&a.plan_args.resolve(&layers)?);
    }
    let mut w = stdout_csv();
    w.write_record(["layer", "kind", "input_shape", "output_shape", "input_format", "output_format", "detail"])?;
    if let Some(c) = &container {
        let mut shape = c.manifest.input_shape.clone();
        let fmt = c.input_format()?.map(|f| f.to_string()).unwrap_or_default();
        for (i, l) in c.layers.iter().enumerate() {
            let out = l.output_shape(&shape)?;
            let kind = match l.kind {
                LayerKind::Dense => "dense",
                LayerKind::Conv2d => "conv2d",
                LayerKind::MaxPool => "maxpool",
            };
            let mut detail = format!("params={}", l.weights.len() + l.bias.len());
            if let Some(act) = l.activation {
                detail.push_str(&format!(" activation={act:?}").to_lowercase());
            }
            let in_fmt = if i == 0 { fmt.as_str() } else { "" };
            w.write_record([&l.name, kind, &shape_label(&shape), &shape_label(&out), in_fmt, "", &detail])?;
            shape = out;
        }
    } else if let Some(p) = &a.plan {
        let plan = load_plan(p).with_context(|| format!("reading plan {}", p.display()))?;
        for l in &plan.layers {
            let detail = match &l.op {
                LayerOp::Affine(af) => format!(
                    "tables={}/{} lut_bits={} evals={} mode={}{}",
                    af.bank.physical_count(),
                    af.bank.logical_count(),
                    af.bank.size_bits(),
                    af.lut_evals(),
                    af.bit_mode,
                    match af.rounding {
                        OutputRounding::Stochastic { frac_bits, r_count, seed } =>
                            format!(" stochastic(f={frac_bits},R={r_count},seed={seed})"),
                        OutputRounding::NearestEven => String::new(),
                    }
                ),
                LayerOp::Table { lut } => format!("lut_bits={}", lut.size_bits()),
                LayerOp::MaxPool { windows } => format!("windows={}", windows.len()),
                LayerOp::Relu { .. } => String::new(),
            };
            w.write_record([
                &l.name,
                l.kind(),
                &shape_label(&l.input_shape),
                &shape_label(&l.output_shape),
                &l.input_format.to_string(),
                &l.output_format.to_string(),
                &detail,
            ])?;
        }
    } else {
        return Err(Usage("inspect needs --weights or --plan (or --show-config)".into()).into());
    }
    w.flush()?;
    Ok(())
}
