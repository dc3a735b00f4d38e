use proptest::prelude::*;

use timegate::gateviz::{capture_temporal_gates, pool_gates};
use timegate::harness::gradcheck::randomize;
use timegate::harness::oracles::{factorization_locality, random_layer};
use timegate::harness::train::argmax;
use timegate::pipeline::{ModelConfig, ModelState};
use timegate::synth::{generate, DatasetSpec, Task};
use timegate::tg_block::{tg_forward, GateOverride, TGConfig, TGLayerParams};
use timegate::{RngState, Tensor};

fn small_cfg(d_model: usize, heads: usize, layers: usize) -> TGConfig {
    let mut cfg = TGConfig::new(d_model, heads);
    cfg.num_layers = layers;
    cfg.mlp_hidden = 16;
    cfg
}

fn stack(cfg: &TGConfig, seed: u64) -> Vec<TGLayerParams> {
    let mut rng = RngState::new(seed);
    (0..cfg.num_layers).map(|_| random_layer(cfg, &mut rng).unwrap()).collect()
}

fn video(shape: [usize; 3], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(&shape, RngState::new(seed).derive("video").normal_vec(n, 1.0)).unwrap()
}

fn reverse_frames(v: &Tensor) -> Tensor {
    let &[t, l, d] = v.shape() else { unreachable!() };
    let data = (0..t).rev().flat_map(|f| v.data()[f * l * d..(f + 1) * l * d].to_vec()).collect();
    Tensor::new(v.shape(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_lie_on_the_simplex(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..60.0, seed in any::<u64>()) {
        let x = Tensor::new(&[rows, cols], RngState::new(seed).normal_vec(rows * cols, scale)).unwrap();
        let p = x.softmax_last().unwrap();
        for row in p.data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rope_preserves_pair_norms(n in 1usize..7, half in 1usize..6, offset in 0usize..500, seed in any::<u64>()) {
        let d = 2 * half;
        let x = Tensor::new(&[n, d], RngState::new(seed).normal_vec(n * d, 1.0)).unwrap();
        let positions: Vec<usize> = (0..n).map(|i| offset + 3 * i).collect();
        let y = x.rope(&positions, 10_000.0).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let before = a[0].hypot(a[1]);
            let after = b[0].hypot(b[1]);
            prop_assert!((before - after).abs() <= 1e-12);
        }
    }

    #[test]
    fn pure_ops_are_bitwise_repeatable(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let a = Tensor::new(&[m, k], rng.normal_vec(m * k, 1.0)).unwrap();
        let b = Tensor::new(&[k, n], rng.normal_vec(k * n, 1.0)).unwrap();
        let run = || a.matmul(&b).unwrap().softmax_last().unwrap().sigmoid().unwrap().to_vec();
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn factorized_attention_stays_local(seed in any::<u64>()) {
        for r in factorization_locality(seed, 1).unwrap() {
            prop_assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn reversing_frames_changes_temporal_output(frames in 2usize..5, sites in 1usize..4, seed in any::<u64>()) {
        let mut cfg = small_cfg(8, 2, 1);
        cfg.spatial_enabled = false;
        cfg.mlp_enabled = false;
        let params = stack(&cfg, seed);
        let x = video([frames, sites, 8], seed);
        let out = tg_forward(&x, &params, &cfg, None).unwrap();
        let back = reverse_frames(&tg_forward(&reverse_frames(&x), &params, &cfg, None).unwrap());
        let delta = out.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(delta > 0.0);
    }

    #[test]
    fn single_frame_temporal_attention_ignores_rope(sites in 1usize..5, seed in any::<u64>()) {
        let mut cfg = small_cfg(8, 2, 2);
        let params = stack(&cfg, seed);
        let x = video([1, sites, 8], seed);
        let with = tg_forward(&x, &params, &cfg, None).unwrap();
        cfg.spatial_enabled = false;
        cfg.mlp_enabled = false;
        let temporal_rope = tg_forward(&x, &params, &cfg, None).unwrap();
        cfg.rope_enabled = false;
        let temporal_plain = tg_forward(&x, &params, &cfg, None).unwrap();
        prop_assert_eq!(temporal_rope.to_vec(), temporal_plain.to_vec());
        prop_assert_eq!(with.shape(), x.shape());
    }

    #[test]
    fn ungated_equals_force_one(frames in 1usize..4, sites in 1usize..4, heads in 1usize..3, layers in 1usize..3, seed in any::<u64>()) {
        let d = 4 * heads;
        let mut cfg = small_cfg(d, heads, layers);
        let params = stack(&cfg, seed);
        let x = video([frames, sites, d], seed);
        cfg.gate_override = GateOverride::ForceOne;
        let forced = tg_forward(&x, &params, &cfg, None).unwrap();
        cfg.gate_override = GateOverride::None;
        cfg.gating_enabled = false;
        let plain = tg_forward(&x, &params, &cfg, None).unwrap();
        for (a, b) in forced.data().iter().zip(plain.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn fused_length_counts_video_and_text_rows(frames in 1usize..5, queries in 1usize..4, text_len in 0usize..4, seed in 0u64..1000) {
        let cfg = ModelConfig {
            tg: small_cfg(8, 2, 1),
            num_queries: queries,
            text_len,
            ..ModelConfig::default()
        };
        let model = ModelState::init(&cfg, seed).unwrap().build(false).unwrap();
        let out = model.forward(&video([frames, 4, 8], seed), None).unwrap();
        prop_assert_eq!(out.fused_length, frames * queries + text_len);
        prop_assert_eq!(out.logits.shape(), &[2]);
    }

    #[test]
    fn argmax_breaks_ties_low(values in prop::collection::vec(-3i32..3, 1..12)) {
        let logits: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = logits.iter().position(|&v| v == best).unwrap();
        prop_assert_eq!(argmax(&logits), first);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_parameter_receives_gradient(frames in 2usize..4, sites in 2usize..4, seed in any::<u64>()) {
        let cfg = small_cfg(8, 2, 2);
        let params = stack(&cfg, seed);
        let x = video([frames, sites, 8], seed);
        let out = tg_forward(&x, &params, &cfg, None).unwrap();
        out.mul(&out).unwrap().sum().unwrap().backward().unwrap();
        for (layer, p) in params.iter().enumerate() {
            for (name, t) in p.named() {
                let g = t.grad().unwrap_or_default();
                prop_assert_eq!(g.len(), t.numel(), "layer {} {}", layer, name);
                prop_assert!(g.iter().any(|&v| v != 0.0), "layer {} {} has a dead gradient", layer, name);
            }
        }
    }

    #[test]
    fn datasets_are_pure_functions_of_the_spec(
        task in prop_oneof![Just(Task::Order), Just(Task::Direction), Just(Task::Static)],
        frames in 4usize..7,
        grid in 3usize..5,
        seed in any::<u64>(),
    ) {
        let spec = DatasetSpec { task, n_train: 6, n_test: 4, frames, grid, d_model: 8, seed, ..DatasetSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.train.iter().chain(&a.test).zip(b.train.iter().chain(&b.test)) {
            prop_assert_eq!(&x.video, &y.video);
            prop_assert_eq!(x.label, y.label);
        }
    }

    #[test]
    fn heatmap_width_follows_frame_count(short in 2usize..6, extra in 1usize..6, seed in 0u64..1000) {
        let cfg = ModelConfig { tg: small_cfg(8, 2, 1), num_queries: 2, ..ModelConfig::default() };
        let mut state = ModelState::init(&cfg, seed).unwrap();
        randomize(&mut state.params, &RngState::new(seed));
        let model = state.build(false).unwrap();
        let shape_for = |frames: usize| {
            let spec = DatasetSpec { task: Task::Direction, n_train: 0, n_test: 1, frames, grid: 3, d_model: 8, seed, ..DatasetSpec::default() };
            let sample = &generate(&spec).unwrap().test[0];
            let gates = capture_temporal_gates(&model, &sample.video().unwrap(), 0).unwrap();
            pool_gates(&gates).unwrap().shape()
        };
        prop_assert_eq!(shape_for(short), [9, short]);
        prop_assert_eq!(shape_for(short + extra), [9, short + extra]);
    }
}
