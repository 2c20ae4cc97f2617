//! Acceptance suite: one PASS/FAIL line per primary criterion, written
//! straight to stdout so it shows up without `--nocapture`.
//!
//! The end-to-end and bit-sensitivity criteria need MNIST and Fashion-MNIST
//! under `$LUTNET_DATA_DIR` (default: `data/` at the workspace root). They
//! fail, not skip, when the files are missing.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use lutnet::compiler::{compile_dense, BitMode, ConvShape, MicroOp, NetworkPlan, PartitionConfig};
use lutnet::costs::{self, cost_dense, cost_stochastic_rounder, uniform_chunks, Arch, CostReport, SweepPoint};
use lutnet::engine::rounder::{stochastic_round, StochasticRounder, DEFAULT_SEED};
use lutnet::engine::Engine;
use lutnet::exec::{map_range, ExecPolicy};
use lutnet::formats::{Code, FixedFormat, NumericFormat};
use lutnet::modelio::load_plan;
use lutnet::oracle::Oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Every plan compiled by the suite, for the multiplier audit.
#[derive(Default)]
struct Audit {
    plans: usize,
    traced: usize,
    offenders: Vec<String>,
}

impl Audit {
    fn note(&mut self, label: &str, plan: &NetworkPlan) {
        self.plans += 1;
        if plan.micro_ops().contains(&MicroOp::Multiply) {
            self.offenders.push(format!("{label}: schedule uses Multiply"));
        }
        if plan.is_runnable() {
            let x = vec![plan.input_format.zero_code(); plan.input_len()];
            match Engine::new(plan).and_then(|e| e.infer_traced(&x)) {
                Ok((_, tallies)) if tallies.iter().all(|t| t.multiplies == 0) => self.traced += 1,
                Ok(_) => self.offenders.push(format!("{label}: trace counted multiplies")),
                Err(e) => self.offenders.push(format!("{label}: {e}")),
            }
        }
    }
}

struct Report {
    failures: Vec<String>,
}

impl Report {
    fn run(&mut self, name: &str, limit: Duration, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > limit => Err(format!("{d}; over the {} s limit", limit.as_secs())),
            r => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        let line = format!("{tag}  {name}  [{:.1} s]  {detail}\n", took.as_secs_f64());
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if result.is_err() {
            self.failures.push(name.to_string());
        }
    }
}

fn exhaustive_dense(audit: &mut Audit) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0001);
    let (mut cases, mut inputs) = (0usize, 0usize);
    for layer in 0..50 {
        let p = rng.random_range(1..=6);
        let q = rng.random_range(1..=4);
        let r = rng.random_range(1..=4);
        let (w, b) = random_layer(&mut rng, p, q);
        let opts = nearest_even(random_output_format(&mut rng));
        for signed in [false, true] {
            let fmt = fixed(r, signed);
            let container = dense_container(&w, &b, p, q);
            let oracle = Oracle::new(&container, spec(fmt, &opts)).map_err(|e| e.to_string())?;
            let codes: Vec<Code> = fmt.codes().collect();
            let total = codes.len().pow(q as u32);
            let xs: Vec<Vec<Code>> = (0..total).map(|i| nth_input(&codes, q, i)).collect();
            let want = map_range(ExecPolicy::Parallel, total, |i| oracle.evaluate(&xs[i]).unwrap().0);
            for mode in [BitMode::WholeWord, BitMode::Bitplane] {
                for chunks in set_partitions(q) {
                    let cfg = PartitionConfig::new(chunks.clone(), mode, fmt);
                    let plan = NetworkPlan::from_affine(
                        "layer",
                        compile_dense(&w, &b, p, q, &cfg, &opts).map_err(|e| e.to_string())?,
                    );
                    let engine = Engine::new(&plan).map_err(|e| e.to_string())?;
                    let bad: usize = map_range(ExecPolicy::Parallel, total, |i| {
                        (engine.infer(&xs[i]).unwrap() != want[i]) as usize
                    })
                    .into_iter()
                    .sum();
                    ensure(bad == 0, || {
                        format!("layer {layer}: {bad}/{total} mismatches (p={p} q={q} {fmt} {mode} {chunks:?})")
                    })?;
                    audit.note(&format!("dense layer {layer} {fmt} {mode} {chunks:?}"), &plan);
                    cases += 1;
                    inputs += total;
                }
            }
        }
    }
    Ok(format!("{cases} configurations, {inputs} inputs, 0 mismatches"))
}

fn float_recombination(audit: &mut Audit) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0002);
    let (p, q) = (4, 2);
    let (w, b) = random_layer(&mut rng, p, q);
    let fmt = NumericFormat::binary16().nonnegative();
    let opts = nearest_even(NumericFormat::binary16());
    let compile = |mode| {
        let cfg = PartitionConfig::per_element(q, mode, fmt);
        compile_dense(&w, &b, p, q, &cfg, &opts).map(|a| NetworkPlan::from_affine("layer", a))
    };
    let whole = compile(BitMode::WholeWord).map_err(|e| e.to_string())?;
    let planes = compile(BitMode::Bitplane).map_err(|e| e.to_string())?;
    audit.note("binary16 whole-word", &whole);
    audit.note("binary16 bitplane", &planes);
    let (ew, eb) = (Engine::new(&whole).unwrap(), Engine::new(&planes).unwrap());

    let max_normal: Code = 0x7bff;
    let edges = [0, 1, max_normal];
    let mut xs: Vec<Vec<Code>> = Vec::with_capacity(1_000_009);
    for a in edges {
        for c in edges {
            xs.push(vec![a, c]);
        }
    }
    for _ in 0..1_000_000 {
        xs.push((0..q).map(|_| rng.random_range(0..=max_normal)).collect());
    }
    let bad: Vec<usize> = map_range(ExecPolicy::Parallel, xs.len(), |i| {
        (ew.infer(&xs[i]).unwrap() != eb.infer(&xs[i]).unwrap()) as usize
    });
    let n_bad: usize = bad.iter().sum();
    ensure(n_bad == 0, || {
        let first = bad.iter().position(|&v| v == 1).unwrap();
        format!("{n_bad} mismatches, first at input {:?}", xs[first])
    })?;
    // Both sides also agree with the single-rounding reference.
    let container = dense_container(&w, &b, p, q);
    let oracle = Oracle::new(&container, spec(fmt, &opts)).unwrap();
    for x in xs.iter().step_by(997) {
        ensure(oracle.evaluate(x).unwrap().0 == eb.infer(x).unwrap(), || format!("oracle differs at {x:?}"))?;
    }
    Ok(format!("{} input vectors ({} elements) incl. edge codes, 0 mismatches", xs.len(), xs.len() * q))
}

fn conv_equivalence(audit: &mut Audit) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0003);
    let mut configs = 0;
    for k in [3, 5] {
        for m in [1, 2, 4] {
            for signed in [false, true] {
                let h = rng.random_range(k.max(m)..=8);
                let w = rng.random_range(k.max(m)..=8);
                let shape = ConvShape { h, w, cin: 2, cout: 3, k };
                let mode = if m == 4 { BitMode::Bitplane } else { BitMode::WholeWord };
                let input = fixed(2, signed);
                let opts = nearest_even(random_output_format(&mut rng));
                let (bad, plan) = conv_random(&mut rng, shape, m, mode, input, &opts, 1000);
                ensure(bad == 0, || format!("{bad}/1000 images differ: k={k} m={m} {h}x{w} {input} {mode}"))?;
                audit.note(&format!("conv k={k} m={m} {input}"), &plan);
                configs += 1;
            }
        }
    }
    Ok(format!("{configs} configurations x 1000 images, 0 mismatches"))
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

fn cost_numbers() -> Check {
    let u3 = NumericFormat::Fixed(FixedFormat::unsigned(3));
    let e = |e: lutnet::Error| e.to_string();
    let linear = cost_dense(10, 784, &[1; 784], u3, BitMode::Bitplane, 16).map_err(e)?;
    ensure(linear.reference_macs == 7840, || format!("MACs {}", linear.reference_macs))?;
    let input_bits = 784 * u3.width();
    ensure(input_bits == 2352, || format!("input bits {input_bits}"))?;
    ensure(linear.total_lut_bits == 250_880u32.into(), || format!("784-chunk bits {}", linear.total_lut_bits))?;
    let kib = linear.total_bytes() / 1024.0;
    ensure(within(kib, 30.6, 0.01), || format!("784-chunk size {kib} KiB"))?;

    let c56 = cost_dense(10, 784, &uniform_chunks(784, 14), u3, BitMode::Bitplane, 16).map_err(e)?;
    ensure(c56.total_lut_bits == (56u64 * (1 << 14) * 160).into(), || format!("56-chunk bits {}", c56.total_lut_bits))?;
    ensure(c56.human_size() == "17.5 MiB", || format!("56-chunk size {}", c56.human_size()))?;
    ensure(c56.lut_evals == 168, || format!("56-chunk evals {}", c56.lut_evals))?;
    ensure(c56.shift_adds_c1 == 1650, || format!("56-chunk C1 {}", c56.shift_adds_c1))?;

    let mlp = Arch::mlp();
    let point = SweepPoint {
        chunk: 1,
        mode: BitMode::WholeWord,
        block: 1,
    };
    let total: CostReport = costs::cost_arch(&mlp, point, 16)
        .map_err(e)?
        .into_iter()
        .map(|l| l.report)
        .sum();
    ensure(mlp.reference_macs() == 1_332_224, || format!("MLP MACs {}", mlp.reference_macs()))?;
    ensure(total.reference_macs == 1_332_224, || format!("MLP report MACs {}", total.reference_macs))?;
    ensure(total.shift_adds_c1 == 1_330_678, || format!("MLP additions {}", total.shift_adds_c1))?;
    ensure(total.logical_tables == 2320, || format!("MLP logical tables {}", total.logical_tables))?;
    let gib = total.total_bytes() / (1u64 << 30) as f64;
    ensure(within(gib, 32.7, 0.02), || format!("whole-word MLP {gib:.3} GiB"))?;

    for (r, bi, bo) in [(1u64, 8u32, 8u32), (64, 8, 8), (16, 16, 16), (7, 5, 3)] {
        let want = r as u128 * (1u128 << bi) * bo as u128;
        ensure(cost_stochastic_rounder(r, bi, bo) == want, || format!("rounder R={r} bI={bi} bO={bo}"))?;
    }
    ensure(cost_stochastic_rounder(64, 8, 8) == 131_072, || "rounder 64/8/8".into())?;
    ensure(cost_stochastic_rounder(16, 16, 16) == 1 << 24, || "rounder 16/16/16".into())?;
    let unit = StochasticRounder::seeded(12, 3)
        .and_then(|u| u.with_tables(fixed_fmt(10, -10), fixed_fmt(6, -6)))
        .map_err(e)?;
    ensure(unit.size_bits() == cost_stochastic_rounder(12, 10, 6), || {
        format!("materialized rounder {} bits", unit.size_bits())
    })?;
    Ok(format!(
        "MACs 7840, input bits 2352, {kib:.3} KiB, 17.5 MiB/168/1650, MLP 1332224/1330678/2320, {gib:.2} GiB"
    ))
}

fn fixed_fmt(bits: u32, scale: i32) -> NumericFormat {
    NumericFormat::Fixed(FixedFormat::new(bits, false, scale).unwrap())
}

fn stochastic_rounding() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE_0007);
    let out = fixed_fmt(4, -4);
    let eps = 1.0 / 16.0;
    let mut worst: f64 = 0.0;
    for r in [16usize, 64, 256] {
        for seed in [DEFAULT_SEED, 1, 2] {
            let bound = 2.0 * eps / (r as f64).sqrt();
            let mut unit = StochasticRounder::seeded(r, seed).map_err(|e| e.to_string())?;

            for k in 0..16 {
                let x = k as f64 * eps;
                for _ in 0..r {
                    let c = stochastic_round(x, out, &mut unit).unwrap();
                    ensure(out.value(c) == x, || format!("on-grid {x} moved to {} (R={r})", out.value(c)))?;
                }
            }

            let mut sum = 0.0;
            for _ in 0..1000 {
                let x = rng.random_range(0.0..15.0 * eps);
                let lo = (x / eps).floor() * eps;
                let mut mean = 0.0;
                for _ in 0..r {
                    let v = out.value(stochastic_round(x, out, &mut unit).unwrap());
                    ensure(v == lo || v == lo + eps, || format!("x={x} rounded to {v}"))?;
                    mean += v;
                }
                sum += mean / r as f64 - x;
            }
            let bias = sum / 1000.0;
            ensure(bias.abs() <= bound, || format!("value path R={r} seed={seed}: bias {bias:.3e} > {bound:.3e}"))?;
            worst = worst.max(bias.abs() / bound);

            // The frozen (x, i) table gives the same distribution.
            let input = fixed_fmt(12, -12);
            let mut table = StochasticRounder::seeded(r, seed)
                .and_then(|u| u.with_tables(input, out))
                .map_err(|e| e.to_string())?;
            for k in 0..16u32 {
                for _ in 0..r {
                    let c = table.round_code(k << 8).unwrap();
                    ensure(out.value(c) == k as f64 * eps, || format!("table on-grid code {k} moved"))?;
                }
            }
            let mut sum = 0.0;
            for _ in 0..1000 {
                let code: Code = rng.random_range(0..15 << 8);
                let x = input.value(code);
                let lo = (x / eps).floor() * eps;
                let mut mean = 0.0;
                for _ in 0..r {
                    let v = out.value(table.round_code(code).unwrap());
                    ensure(v == lo || v == lo + eps, || format!("table x={x} rounded to {v}"))?;
                    mean += v;
                }
                sum += mean / r as f64 - x;
            }
            let bias = sum / 1000.0;
            ensure(bias.abs() <= bound, || format!("table path R={r} seed={seed}: bias {bias:.3e} > {bound:.3e}"))?;
            worst = worst.max(bias.abs() / bound);
        }
    }
    Ok(format!("R in {{16, 64, 256}} x 3 seeds, value and table paths; worst |bias| = {worst:.2} of the bound"))
}

struct Trained {
    dir: PathBuf,
}

fn data_root() -> PathBuf {
    std::env::var_os("LUTNET_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_lutnet"))
        .args(args)
        .env("LUTNET_DATA_DIR", data_root())
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!(
            "`lutnet {}` exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn metric(csv_text: &str, name: &str) -> Result<f64, String> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        if &rec[0] == name {
            return rec[3].parse().map_err(|_| format!("bad {name} value"));
        }
    }
    Err(format!("no {name} row in eval output"))
}

impl Trained {
    fn weights(&self, dataset: &str, bits: u32) -> PathBuf {
        self.dir.join(format!("{dataset}-{bits}.lnw"))
    }

    fn train(&self, dataset: &str, bits: u32) -> Result<PathBuf, String> {
        let out = self.weights(dataset, bits);
        let bits_s = bits.to_string();
        cli(&[
            "train", "--dataset", dataset, "--bits", &bits_s, "--episodes", "50000", "--batch", "100", "--out",
            out.to_str().unwrap(),
        ])?;
        Ok(out)
    }

    /// Compiles a per-pixel bitplane plan, then evaluates plan and oracle.
    fn eval(&self, dataset: &str, weights: &Path, audit: &mut Audit) -> Result<(f64, f64), String> {
        let plan = weights.with_extension("lnp");
        let w = weights.to_str().unwrap();
        cli(&["compile", "--weights", w, "--chunks", "1", "--bit-mode", "bitplane", "--out", plan.to_str().unwrap()])?;
        let loaded = load_plan(&plan).map_err(|e| e.to_string())?;
        audit.note(&format!("{}", plan.display()), &loaded);
        let out = cli(&["eval", "--weights", w, "--plan", plan.to_str().unwrap(), "--dataset", dataset, "--via", "both"])?;
        Ok((metric(&out, "accuracy_plan")?, metric(&out, "agreement_plan_oracle")?))
    }
}

fn end_to_end(t: &Trained, audit: &mut Audit) -> Check {
    let mut parts = Vec::new();
    let mut problems = Vec::new();
    for (dataset, floor) in [("mnist", 0.900), ("fashion", 0.780)] {
        let w = t.train(dataset, 3)?;
        let (acc, agree) = t.eval(dataset, &w, audit)?;
        parts.push(format!("{dataset} {:.2}% (agreement {:.2}%)", acc * 100.0, agree * 100.0));
        if acc < floor {
            problems.push(format!("{dataset} accuracy {:.2}% below {:.1}%", acc * 100.0, floor * 100.0));
        }
        if agree != 1.0 {
            problems.push(format!("{dataset} plan/oracle agreement {:.4}", agree));
        }
    }
    if problems.is_empty() {
        Ok(parts.join(", "))
    } else {
        Err(format!("{}; {}", problems.join("; "), parts.join(", ")))
    }
}

fn bit_sensitivity(t: &Trained, audit: &mut Audit) -> Check {
    let mut acc = Vec::new();
    for bits in [1, 3, 8] {
        let w = t.weights("mnist", bits);
        let w = if w.exists() { w } else { t.train("mnist", bits)? };
        acc.push(t.eval("mnist", &w, audit)?.0 * 100.0);
    }
    let detail = format!("acc(1) = {:.2}%, acc(3) = {:.2}%, acc(8) = {:.2}%", acc[0], acc[1], acc[2]);
    ensure(acc[0] < acc[1], || format!("acc(1) not below acc(3): {detail}"))?;
    ensure(acc[1] >= acc[2] - 0.5, || format!("no plateau: {detail}"))?;
    Ok(detail)
}

#[test]
fn primary_criteria() {
    std::io::stdout().write_all(b"\nprimary acceptance criteria\n").unwrap();
    let mut report = Report { failures: Vec::new() };
    let mut audit = Audit::default();
    let tmp = tempfile::tempdir().unwrap();
    let trained = Trained {
        dir: tmp.path().to_path_buf(),
    };
    let s = Duration::from_secs;

    report.run("exhaustive dense equivalence", s(60), || exhaustive_dense(&mut audit));
    report.run("binary16 bitplane recombination", s(60), || float_recombination(&mut audit));
    report.run("convolution equivalence", s(120), || conv_equivalence(&mut audit));
    report.run("cost model numbers", s(5), cost_numbers);
    report.run("end-to-end linear classifier", s(15 * 60), || end_to_end(&trained, &mut audit));
    report.run("input bit sensitivity", s(15 * 60), || bit_sensitivity(&trained, &mut audit));
    report.run("stochastic rounding", s(10), stochastic_rounding);
    report.run("multiplier-free audit", s(60), || {
        ensure(audit.offenders.is_empty(), || audit.offenders.join("; "))?;
        ensure(audit.plans > 0, || "no plans were compiled".into())?;
        Ok(format!(
            "{} plans without Multiply in their schedules, {} traced with zero multiplies",
            audit.plans, audit.traced
        ))
    });

    assert!(report.failures.is_empty(), "failed criteria: {:?}", report.failures);
}
