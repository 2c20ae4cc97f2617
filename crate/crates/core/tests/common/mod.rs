#![allow(dead_code)]
//! Helpers shared by the integration tests and the acceptance suite.

use lutnet::compiler::{
    compile_conv2d, compile_dense, BitMode, ConvShape, LayerOptions, NetworkPlan, OutputRounding, PartitionConfig,
};
use lutnet::engine::Engine;
use lutnet::exec::{map_range, ExecPolicy};
use lutnet::formats::{Code, FixedFormat, NumericFormat};
use lutnet::modelio::{LayerRecord, Manifest, WeightContainer};
use lutnet::oracle::{self, LayerQuant, Oracle, QuantSpec};
use rand::Rng;

/// Every set partition of `0..q`, as restricted growth strings.
pub fn set_partitions(q: usize) -> Vec<Vec<Vec<usize>>> {
    fn grow(i: usize, q: usize, cur: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if i == q {
            out.push(cur.clone());
            return;
        }
        for b in 0..cur.len() {
            cur[b].push(i);
            grow(i + 1, q, cur, out);
            cur[b].pop();
        }
        cur.push(vec![i]);
        grow(i + 1, q, cur, out);
        cur.pop();
    }
    let mut out = Vec::new();
    grow(0, q, &mut Vec::new(), &mut out);
    out
}

pub fn fixed(bits: u32, signed: bool) -> NumericFormat {
    NumericFormat::Fixed(if signed {
        FixedFormat::signed(bits)
    } else {
        FixedFormat::unsigned(bits)
    })
}

/// Random weights and biases in `[-1, 1)`, with some exact zeros.
pub fn random_layer(rng: &mut impl Rng, p: usize, q: usize) -> (Vec<f32>, Vec<f32>) {
    let mut draw = |_| {
        if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(-1.0f32..1.0)
        }
    };
    let w = (0..p * q).map(&mut draw).collect();
    let b = (0..p).map(&mut draw).collect();
    (w, b)
}

pub fn random_output_format(rng: &mut impl Rng) -> NumericFormat {
    match rng.random_range(0..4) {
        0 => NumericFormat::binary16(),
        1 => NumericFormat::Fixed(FixedFormat::new(12, true, -6).unwrap()),
        2 => "minifloat-e4m3-style".parse().unwrap(),
        _ => NumericFormat::Fixed(FixedFormat::new(8, true, -3).unwrap()),
    }
}

/// Decodes input number `i` as mixed-radix digits over the format's codes.
pub fn nth_input(codes: &[Code], q: usize, mut i: usize) -> Vec<Code> {
    let mut x = Vec::with_capacity(q);
    for _ in 0..q {
        x.push(codes[i % codes.len()]);
        i /= codes.len();
    }
    x
}

pub fn dense_container(w: &[f32], b: &[f32], p: usize, q: usize) -> WeightContainer {
    WeightContainer {
        manifest: Manifest {
            name: "layer".into(),
            arch: "dense".into(),
            input_shape: vec![q],
            ..Manifest::default()
        },
        layers: vec![LayerRecord::dense("layer", p, q, w.to_vec(), b.to_vec())],
    }
}

pub fn spec(input: NumericFormat, opts: &LayerOptions) -> QuantSpec {
    QuantSpec {
        input_format: input,
        weight_bits: opts.weight_bits,
        layers: vec![LayerQuant {
            output_format: opts.output_format,
            rounding: opts.rounding,
            activation_format: None,
        }],
    }
}

/// Compiles one dense layer and compares engine and oracle on every input.
/// Returns (inputs checked, mismatches, the compiled network).
pub fn dense_exhaustive(
    w: &[f32],
    b: &[f32],
    p: usize,
    q: usize,
    cfg: &PartitionConfig,
    opts: &LayerOptions,
) -> (usize, usize, NetworkPlan) {
    let plan = NetworkPlan::from_affine("layer", compile_dense(w, b, p, q, cfg, opts).expect("compiles"));
    let container = dense_container(w, b, p, q);
    let oracle = Oracle::new(&container, spec(cfg.input_format, opts)).unwrap();
    let engine = Engine::new(&plan).unwrap();
    let codes: Vec<Code> = cfg.input_format.codes().collect();
    let total = codes.len().pow(q as u32);
    let bad = map_range(ExecPolicy::Parallel, total, |i| {
        let x = nth_input(&codes, q, i);
        (engine.infer(&x).unwrap() != oracle.evaluate(&x).unwrap().0) as usize
    })
    .into_iter()
    .sum();
    (total, bad, plan)
}

/// Compiles a convolution and compares engine and direct oracle on random
/// images. Returns the number of mismatching images and the network.
#[allow(clippy::too_many_arguments)]
pub fn conv_random(
    rng: &mut impl Rng,
    shape: ConvShape,
    block: usize,
    mode: BitMode,
    input: NumericFormat,
    opts: &LayerOptions,
    images: usize,
) -> (usize, NetworkPlan) {
    let ConvShape { h, w, cin, cout, k } = shape;
    let kernel: Vec<f32> = (0..k * k * cin * cout).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let bias: Vec<f32> = (0..cout).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let plan = NetworkPlan::from_affine(
        "conv",
        compile_conv2d(&kernel, &bias, shape, block, mode, input, opts).expect("compiles"),
    );
    let codes: Vec<Code> = input.codes().collect();
    let xs: Vec<Vec<Code>> = (0..images)
        .map(|_| (0..h * w * cin).map(|_| codes[rng.random_range(0..codes.len())]).collect())
        .collect();
    let engine = Engine::new(&plan).unwrap();
    let bad = map_range(ExecPolicy::Parallel, images, |i| {
        let want = oracle::conv2d(
            &kernel,
            &bias,
            shape,
            &xs[i],
            input,
            opts.output_format,
            opts.weight_bits,
            &opts.rounding,
        )
        .unwrap();
        (engine.infer(&xs[i]).unwrap() != want) as usize
    })
    .into_iter()
    .sum();
    (bad, plan)
}

pub fn nearest_even(output: NumericFormat) -> LayerOptions {
    LayerOptions {
        output_format: output,
        rounding: OutputRounding::NearestEven,
        ..LayerOptions::default()
    }
}
