mod common;

use common::*;
use lutnet::compiler::{
    compile_dense, compile_network, BiasMode, BitMode, ConvShape, LayerOptions, NetworkOptions, NetworkPlan,
    OutputRounding, PartitionConfig, PlanConfig,
};
use lutnet::engine::{self, Engine};
use lutnet::formats::{Code, FixedFormat, NumericFormat, QuantizedTensor};
use lutnet::modelio::{LayerRecord, Manifest, WeightContainer};
use lutnet::oracle::Oracle;
use lutnet::{Error, ExecPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn partitions_enumerated() {
    let bell = [1, 1, 2, 5, 15, 52];
    for (q, &n) in bell.iter().enumerate() {
        assert_eq!(set_partitions(q).len(), n);
    }
}

#[test]
fn dense_matches_oracle_on_every_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..6 {
        let p = rng.random_range(1..=5);
        let q = rng.random_range(1..=3);
        let r = rng.random_range(1..=3);
        let (w, b) = random_layer(&mut rng, p, q);
        let opts = nearest_even(random_output_format(&mut rng));
        for signed in [false, true] {
            for mode in [BitMode::WholeWord, BitMode::Bitplane] {
                for chunks in set_partitions(q) {
                    let cfg = PartitionConfig::new(chunks.clone(), mode, fixed(r, signed));
                    let (n, bad, _) = dense_exhaustive(&w, &b, p, q, &cfg, &opts);
                    assert_eq!(bad, 0, "{bad}/{n} mismatches: p={p} q={q} r={r} signed={signed} {mode} {chunks:?}");
                }
            }
        }
    }
}

#[test]
fn bitplane_groups_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (w, b) = random_layer(&mut rng, 3, 2);
    let opts = nearest_even(NumericFormat::binary16());
    for (fmt, g) in [(fixed(4, false), 2), (fixed(5, true), 2), (fixed(4, false), 4)] {
        let cfg = PartitionConfig::per_element(2, BitMode::BitplaneGroup(g), fmt);
        let (_, bad, _) = dense_exhaustive(&w, &b, 3, 2, &cfg, &opts);
        assert_eq!(bad, 0, "{fmt} g={g}");
    }
    let cfg = PartitionConfig::per_element(2, BitMode::BitplaneGroup(3), fixed(4, false));
    assert!(matches!(compile_dense(&w, &b, 3, 2, &cfg, &opts), Err(Error::Compile(_))));
}

#[test]
fn per_table_bias_matches_accumulator_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (w, b) = random_layer(&mut rng, 4, 3);
    let opts = LayerOptions {
        bias: BiasMode::PerTable,
        ..nearest_even(NumericFormat::binary16())
    };
    let cfg = PartitionConfig::new(vec![vec![0, 2], vec![1]], BitMode::WholeWord, fixed(2, false));
    let (_, bad, _) = dense_exhaustive(&w, &b, 4, 3, &cfg, &opts);
    assert_eq!(bad, 0);
    // bitplane and signed plans have several passes, so a per-table bias would repeat
    for cfg in [
        PartitionConfig::per_element(3, BitMode::Bitplane, fixed(2, false)),
        PartitionConfig::per_element(3, BitMode::WholeWord, fixed(2, true)),
    ] {
        assert!(matches!(compile_dense(&w, &b, 4, 3, &cfg, &opts), Err(Error::Compile(_))));
    }
}

#[test]
fn entry_width_override() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (w, b) = random_layer(&mut rng, 2, 2);
    let cfg = PartitionConfig::per_element(2, BitMode::WholeWord, fixed(3, false));
    let wide = LayerOptions {
        entry_bits: Some(40),
        ..nearest_even(NumericFormat::binary16())
    };
    let (_, bad, plan) = dense_exhaustive(&w, &b, 2, 2, &cfg, &wide);
    assert_eq!(bad, 0);
    assert_eq!(plan.lut_bits(), 2 * 8 * 2 * 40);
    let narrow = LayerOptions {
        entry_bits: Some(4),
        ..wide
    };
    assert!(matches!(compile_dense(&w, &b, 2, 2, &cfg, &narrow), Err(Error::Capacity(_))));
}

#[test]
fn float_bitplanes_recombine() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (p, q) = (3, 4);
    let (w, b) = random_layer(&mut rng, p, q);
    let half = NumericFormat::binary16().nonnegative();
    let opts = nearest_even(NumericFormat::binary16());
    let plans: Vec<NetworkPlan> = [BitMode::WholeWord, BitMode::Bitplane, BitMode::BitplaneGroup(11)]
        .into_iter()
        .map(|m| {
            let cfg = PartitionConfig::per_element(q, m, half);
            NetworkPlan::from_affine("l", compile_dense(&w, &b, p, q, &cfg, &opts).unwrap())
        })
        .collect();
    let engines: Vec<Engine> = plans.iter().map(|p| Engine::new(p).unwrap()).collect();
    let max = half.as_float().unwrap().max_finite_code();
    for i in 0..20_000 {
        let x: Vec<Code> = (0..q)
            .map(|j| match (i + j) % 7 {
                0 => 0,
                1 => 1,
                2 => max,
                _ => rng.random_range(0..=max),
            })
            .collect();
        let whole = engines[0].infer(&x).unwrap();
        assert_eq!(engines[1].infer(&x).unwrap(), whole, "{x:?}");
        assert_eq!(engines[2].infer(&x).unwrap(), whole, "{x:?}");
    }
}

#[test]
fn signed_float_bitplanes_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (w, b) = random_layer(&mut rng, 2, 2);
    let fmt: NumericFormat = "e3m2".parse().unwrap();
    let opts = nearest_even(NumericFormat::binary16());
    for mode in [BitMode::WholeWord, BitMode::Bitplane] {
        let cfg = PartitionConfig::new(vec![vec![0, 1]], mode, fmt);
        let (n, bad, _) = dense_exhaustive(&w, &b, 2, 2, &cfg, &opts);
        assert_eq!(bad, 0, "{mode}: {bad}/{n}");
    }
}

#[test]
fn conv_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let opts = nearest_even(NumericFormat::binary16());
    for (k, h, w, block, mode) in [
        (3, 5, 6, 1, BitMode::WholeWord),
        (3, 6, 6, 2, BitMode::Bitplane),
        (5, 7, 5, 2, BitMode::WholeWord),
        (5, 8, 8, 4, BitMode::Bitplane),
        (1, 3, 3, 2, BitMode::WholeWord),
    ] {
        let shape = ConvShape {
            h,
            w,
            cin: 2,
            cout: 3,
            k,
        };
        let (bad, _) = conv_random(&mut rng, shape, block, mode, fixed(2, false), &opts, 100);
        assert_eq!(bad, 0, "k={k} {h}x{w} m={block} {mode}");
    }
    let shape = ConvShape {
        h: 4,
        w: 4,
        cin: 1,
        cout: 2,
        k: 3,
    };
    let (bad, _) = conv_random(&mut rng, shape, 2, BitMode::WholeWord, fixed(3, true), &opts, 100);
    assert_eq!(bad, 0, "signed conv");
}

#[test]
fn stochastic_rounding_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (w, b) = random_layer(&mut rng, 5, 3);
    let out = NumericFormat::Fixed(FixedFormat::new(6, true, -2).unwrap());
    for frac_bits in [3, 8, 16] {
        let opts = LayerOptions {
            rounding: OutputRounding::Stochastic {
                frac_bits,
                r_count: 16,
                seed: 99,
            },
            ..nearest_even(out)
        };
        let cfg = PartitionConfig::new(vec![vec![0, 1], vec![2]], BitMode::Bitplane, fixed(3, false));
        let (_, bad, _) = dense_exhaustive(&w, &b, 5, 3, &cfg, &opts);
        assert_eq!(bad, 0, "frac_bits={frac_bits}");
    }
    let too_fine = LayerOptions {
        rounding: OutputRounding::Stochastic {
            frac_bits: 20,
            r_count: 16,
            seed: 1,
        },
        ..nearest_even(out)
    };
    let cfg = PartitionConfig::per_element(3, BitMode::WholeWord, fixed(3, false));
    assert!(matches!(compile_dense(&w, &b, 5, 3, &cfg, &too_fine), Err(Error::Compile(_))));
    let float_out = LayerOptions {
        rounding: OutputRounding::Stochastic {
            frac_bits: 8,
            r_count: 16,
            seed: 1,
        },
        ..nearest_even(NumericFormat::binary16())
    };
    let cfg = PartitionConfig::per_element(3, BitMode::WholeWord, fixed(3, false));
    assert!(matches!(compile_dense(&w, &b, 5, 3, &cfg, &float_out), Err(Error::Compile(_))));
}

fn network() -> WeightContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let conv: Vec<f32> = (0..9 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (w1, b1) = random_layer(&mut rng, 6, 2 * 2 * 2);
    let (w2, b2) = random_layer(&mut rng, 3, 6);
    WeightContainer {
        manifest: Manifest {
            name: "tiny".into(),
            arch: "tiny".into(),
            input_shape: vec![4, 5, 1],
            input_format: Some("u2".into()),
            ..Manifest::default()
        },
        layers: vec![
            LayerRecord::conv2d("conv", 3, 1, 2, conv, vec![0.1, -0.2]).with_activation(lutnet::compiler::ActivationKind::Relu),
            LayerRecord::maxpool("pool", 2, 2),
            LayerRecord::dense("fc1", 6, 8, w1, b1).with_activation(lutnet::compiler::ActivationKind::Tanh),
            LayerRecord::dense("fc2", 3, 6, w2, b2).with_activation(lutnet::compiler::ActivationKind::Sigmoid),
        ],
    }
}

#[test]
fn whole_network_matches_oracle() {
    let c = network();
    let cfg = PlanConfig::from_toml(
        r#"
        [[layer]]
        name = "conv"
        block = 2
        bit_mode = "bitplane"
        output_format = "s10@-5"

        [[layer]]
        name = "fc1"
        chunks = 2
        bit_mode = "bitplane"

        [[layer]]
        name = "fc2"
        chunks = 2
        bit_mode = "whole-word"
        "#,
    )
    .unwrap();
    let plan = compile_network(&c, &cfg, &NetworkOptions::default()).unwrap();
    let kinds: Vec<&str> = plan.layers.iter().map(|l| l.kind()).collect();
    assert_eq!(kinds, ["conv2d", "relu", "maxpool", "dense", "table", "dense", "table"]);
    assert_eq!(plan.output_shape(), &[3]);
    let oracle = Oracle::for_plan(&c, &plan).unwrap();
    let engine = Engine::new(&plan).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..500 {
        let x: Vec<Code> = (0..20).map(|_| rng.random_range(0..4)).collect();
        let (want, fmt) = oracle.evaluate(&x).unwrap();
        assert_eq!(fmt, plan.output_format());
        assert_eq!(engine.infer(&x).unwrap(), want);
    }
}

#[test]
fn batches_agree_across_policies() {
    let c = network();
    let plan = compile_network(&c, &PlanConfig::default(), &NetworkOptions::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let fmt = plan.input_format;
    let xs: Vec<QuantizedTensor> = (0..64)
        .map(|_| QuantizedTensor::new(vec![4, 5, 1], fmt, (0..20).map(|_| rng.random_range(0..4)).collect()).unwrap())
        .collect();
    let par = engine::run_batch(&plan, &xs, ExecPolicy::Parallel).unwrap();
    let seq = engine::run_batch(&plan, &xs, ExecPolicy::Sequential).unwrap();
    assert_eq!(par, seq);
    assert_eq!(par[3], engine::run(&plan, &xs[3]).unwrap());
}

#[test]
fn engine_rejects_bad_inputs_and_cost_only_plans() {
    let c = network();
    let plan = compile_network(&c, &PlanConfig::default(), &NetworkOptions::default()).unwrap();
    let e = Engine::new(&plan).unwrap();
    assert!(matches!(e.infer(&[0; 3]), Err(Error::Run(_))));
    assert!(matches!(e.infer(&[9; 20]), Err(Error::Run(_))));
    let wrong = QuantizedTensor::new(vec![4, 5, 1], fixed(3, false), vec![0; 20]).unwrap();
    assert!(matches!(engine::run(&plan, &wrong), Err(Error::Run(_))));

    let opts = NetworkOptions {
        cost_only: true,
        ..NetworkOptions::default()
    };
    let costed = compile_network(&c, &PlanConfig::default(), &opts).unwrap();
    assert!(!costed.is_runnable());
    assert!(matches!(Engine::new(&costed), Err(Error::Run(_))));
}

#[test]
fn empty_network_is_identity() {
    let c = WeightContainer {
        manifest: Manifest {
            name: "id".into(),
            arch: "id".into(),
            input_shape: vec![3],
            input_format: Some("u4".into()),
            ..Manifest::default()
        },
        layers: vec![],
    };
    let plan = compile_network(&c, &PlanConfig::default(), &NetworkOptions::default()).unwrap();
    assert_eq!(Engine::new(&plan).unwrap().infer(&[1, 2, 15]).unwrap(), vec![1, 2, 15]);
}

#[test]
fn mismatched_layer_formats_are_reported() {
    let c = network();
    let cfg = PlanConfig::from_toml("[[layer]]\nname = \"fc1\"\ninput_format = \"u8\"\n").unwrap();
    match compile_network(&c, &cfg, &NetworkOptions::default()) {
        Err(Error::Compile(m)) => assert!(m.contains("fc1") && m.contains("pool"), "{m}"),
        other => panic!("{other:?}"),
    }
}
