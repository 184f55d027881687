use std::collections::BTreeSet;

use pavedet_core::blocks::{Mode, ParamKind, Parameterized};
use pavedet_core::data::synth_generate;
use pavedet_core::eval::{iou, DetectionBox, GroundTruthBox, Rect};
use pavedet_core::tensor::{max_relative_error, Tape, Tensor};
use pavedet_core::toynet::{
    decode, detection_loss, evaluate_map50, flops_estimate, nms, stack_images, train_toy,
    ModelConfig, Sgd, ToyNet, TrainOptions,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn with_placements(p: &[usize]) -> ModelConfig {
    ModelConfig {
        psa_placements: p.iter().copied().collect(),
        ..Default::default()
    }
}

fn batch(n: usize, seed: u64) -> (Tensor, Vec<Vec<GroundTruthBox>>) {
    let d = synth_generate(n, 64, seed).unwrap();
    let refs: Vec<&Tensor> = d.images.iter().collect();
    (stack_images(&refs).unwrap(), d.targets())
}

fn loss_value(net: &ToyNet, x: &Tensor, targets: &[Vec<GroundTruthBox>]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pred = net.forward(&mut tape, xv, Mode::Train).unwrap();
    let l = detection_loss(&mut tape, pred, targets, 7).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn output_shapes_follow_configuration() {
    let (x, _) = batch(2, 0);
    let net = ToyNet::build(ModelConfig::default(), 0).unwrap();
    assert_eq!(net.predict(&x).unwrap().shape(), &[2, 12, 8, 8]);
    for p in [&[][..], &[0, 1, 2]] {
        let net = ToyNet::build(with_placements(p), 0).unwrap();
        assert_eq!(net.num_psa(), p.len());
        assert_eq!(net.predict(&x).unwrap().shape(), &[2, 12, 8, 8]);
    }
    assert!(ToyNet::build(with_placements(&[5]), 0).is_err());
    assert!(net.predict(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
}

#[test]
fn zero_head_gives_even_objectness() {
    let mut net = ToyNet::build(ModelConfig::default(), 1).unwrap();
    net.head.zero_weights();
    let pred = net.predict(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
    for cell in 0..64 {
        let logit = pred.data()[cell];
        assert_eq!(logit, 0.0);
        assert_eq!(1.0 / (1.0 + (-logit).exp()), 0.5);
    }
}

#[test]
fn forward_is_deterministic() {
    let (x, _) = batch(2, 3);
    let a = ToyNet::build(ModelConfig::default(), 9)
        .unwrap()
        .predict(&x)
        .unwrap();
    let b = ToyNet::build(ModelConfig::default(), 9)
        .unwrap()
        .predict(&x)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn baseline_has_no_attention_parameters() {
    let net = ToyNet::build(with_placements(&[]), 0).unwrap();
    net.visit("", &mut |role, _, _| {
        assert!(!role.contains("psa"), "{role}")
    });
    let with = ToyNet::build(ModelConfig::default(), 0).unwrap();
    let mut n = 0;
    with.visit("", &mut |role, _, _| {
        n += role.starts_with("psa2.attn") as usize
    });
    assert!(n > 0);
}

#[test]
fn loss_gradients_match_finite_differences_on_sampled_parameters() {
    let (x, targets) = batch(2, 4);
    let mut net = ToyNet::build(ModelConfig::default(), 4).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pred = net.forward(&mut tape, xv, Mode::Train).unwrap();
    let l = detection_loss(&mut tape, pred, &targets, 7).unwrap();
    tape.backward(l).unwrap();
    let grads = net.collect_grads(&tape);
    drop(tape);

    let total = net.num_trainable();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let picks: BTreeSet<usize> = (0..total / 100).map(|_| rng.gen_range(0..total)).collect();
    let flat: Vec<f64> = grads.concat();
    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &k in &picks {
        let nudge = |net: &mut ToyNet, delta: Option<f64>| {
            let mut seen = 0;
            let mut orig = 0.0;
            net.visit_mut("", &mut |_, kind, t| {
                if kind != ParamKind::Trainable {
                    return;
                }
                if (seen..seen + t.numel()).contains(&k) {
                    let v = &mut t.data_mut()[k - seen];
                    orig = *v;
                    if let Some(d) = delta {
                        *v = d;
                    }
                }
                seen += t.numel();
            });
            orig
        };
        let orig = nudge(&mut net, None);
        nudge(&mut net, Some(orig + h));
        let plus = loss_value(&net, &x, &targets);
        nudge(&mut net, Some(orig - h));
        let minus = loss_value(&net, &x, &targets);
        nudge(&mut net, Some(orig));
        analytic.push(flat[k]);
        numeric.push((plus - minus) / (2.0 * h));
    }
    assert!(picks.len() >= total / 120);
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < 1e-4, "max relative error {err:e}");
}

fn det(class_id: usize, conf: f64, r: Rect) -> DetectionBox {
    DetectionBox {
        image_id: 0,
        class_id,
        confidence: conf,
        rect: r,
    }
}

#[test]
fn nms_greedy_trace() {
    let a = Rect::new(0.0, 0.0, 0.5, 0.5);
    let b = Rect::new(0.125, 0.0, 0.625, 0.5);
    let dy = 0.35 / 1.3;
    let c = Rect::new(0.0, dy, 0.5, 0.5 + dy);
    assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
    assert!((iou(&a, &c) - 0.3).abs() < 1e-12);
    assert!((iou(&b, &c) - 0.2).abs() < 0.01);
    let kept = nms(&[det(0, 0.9, a), det(0, 0.8, b), det(0, 0.7, c)], 0.5);
    assert_eq!(kept, vec![det(0, 0.9, a), det(0, 0.7, c)]);
}

#[test]
fn loss_definition_cases() {
    let g = GroundTruthBox {
        image_id: 0,
        class_id: 2,
        rect: Rect::new(0.3, 0.3, 0.55, 0.5),
    };
    // saturated logits that reproduce the target exactly
    let grid = 8;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let mut p = Tensor::full(&[1, 12, grid, grid], -20.0);
    let (cx, cy) = (0.425 * 8.0, 0.4 * 8.0);
    let (j, i) = (cx as usize, cy as usize);
    let mut set = |c: usize, v: f64| p.data_mut()[c * 64 + i * grid + j] = v;
    set(0, 20.0);
    set(1 + 2, 20.0);
    set(8, logit(cx - j as f64));
    set(9, logit(cy - i as f64));
    set(10, logit(0.25));
    set(11, logit(0.2));
    let mut tape = Tape::new();
    let pv = tape.constant(p.clone());
    let l = detection_loss(&mut tape, pv, &[vec![g]], 7).unwrap();
    assert!(tape.value(l).data()[0] < 1e-3);

    // no targets: only the mean objectness BCE against zeros
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let raw = Tensor::from_fn(&[2, 12, grid, grid], |_| rng.gen_range(-3.0..3.0));
    let mut tape = Tape::new();
    let pv = tape.constant(raw.clone());
    let l = detection_loss(&mut tape, pv, &[vec![], vec![]], 7).unwrap();
    let mut want = 0.0;
    for b in 0..2 {
        for cell in 0..64 {
            let z: f64 = raw.data()[b * 12 * 64 + cell];
            want += (1.0 + z.exp()).ln();
        }
    }
    assert!((tape.value(l).data()[0] - want / 128.0).abs() < 1e-12);

    let bad = GroundTruthBox {
        rect: Rect::new(0.5, 0.5, 1.5, 0.9),
        ..g
    };
    let mut tape = Tape::new();
    let pv = tape.constant(p);
    assert!(detection_loss(&mut tape, pv, &[vec![bad]], 7).is_err());
}

#[test]
fn loss_decreases_under_sgd_on_a_fixed_batch() {
    let (x, targets) = batch(4, 0);
    let mut net = ToyNet::build(ModelConfig::default(), 0).unwrap();
    let mut sgd = Sgd::new(0.02, 0.0).unwrap();
    let mut prev = f64::INFINITY;
    for step in 0..50 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pred = net.forward(&mut tape, xv, Mode::Train).unwrap();
        let l = detection_loss(&mut tape, pred, &targets, 7).unwrap();
        tape.backward(l).unwrap();
        let value = tape.value(l).data()[0];
        assert!(value < prev, "step {step}: {value} >= {prev}");
        prev = value;
        let grads = net.collect_grads(&tape);
        net.commit_batch_stats(&tape);
        sgd.step(&mut net, &grads).unwrap();
    }
}

#[test]
fn optimizer_leaves_running_stats_alone() {
    let mut net = ToyNet::build(ModelConfig::default(), 0).unwrap();
    let before = net.clone();
    let mut grads = Vec::new();
    net.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Trainable {
            grads.push(vec![1.0; t.numel()]);
        }
    });
    Sgd::new(0.1, 0.0).unwrap().step(&mut net, &grads).unwrap();
    let mut buffers = Vec::new();
    before.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Buffer {
            buffers.push(t.clone());
        }
    });
    let mut i = 0;
    net.visit("", &mut |_, kind, t| {
        if kind == ParamKind::Buffer {
            assert_eq!(t, &buffers[i]);
            i += 1;
        }
    });
    assert!(i > 0);
}

/// Per-layer FLOPs of the default configuration, counted by hand.
#[rustfmt::skip]
const DEFAULT_HAND_COUNT: [u64; 31] = [
    // stage0: 2·16·3·9·32², BN, SiLU
    884_736, 32_768, 32_768,
    // stage1: 2·32·16·9·16²
    2_359_296, 16_384, 16_384,
    // stage2: 2·64·32·9·8²
    2_359_296, 8_192, 8_192,
    // psa2.entry
    524_288, 8_192, 8_192,
    // attention over 32 channels: M=1, D=32, key_dim=16, N=64
    262_144, 8_192, // qkv conv 32→64 + BN
    131_072,        // scores 2·1·16·64²
    20_480,         // softmax 5·1·64²
    262_144,        // weighted sum 2·1·32·64²
    36_864, 2_048,  // pe depthwise 3×3 + bias
    131_072, 4_096, // proj + BN
    // ffn.0 32→64 + BN + SiLU, ffn.1 64→32 + BN
    262_144, 8_192, 8_192,
    262_144, 4_096,
    // exit
    524_288, 8_192, 8_192,
    // head 1×1 64→12 + bias on 8×8
    98_304, 768,
];

#[test]
fn flops_match_hand_count() {
    let r = flops_estimate(&ModelConfig::default()).unwrap();
    let hand = DEFAULT_HAND_COUNT.to_vec();
    let got: Vec<u64> = r.layers.iter().map(|l| l.flops).collect();
    assert_eq!(got, hand);
    assert_eq!(r.total, hand.iter().sum::<u64>());
    assert_eq!(r.total, 8_301_312);
}

#[test]
fn attention_flops_scale_with_positions_squared() {
    let small = flops_estimate(&ModelConfig::default()).unwrap();
    let big = flops_estimate(&ModelConfig {
        input_size: 128,
        ..Default::default()
    })
    .unwrap();
    for name in [
        "psa2.attn.scores",
        "psa2.attn.weighted_sum",
        "psa2.attn.softmax",
    ] {
        assert_eq!(
            big.get(name).unwrap(),
            16 * small.get(name).unwrap(),
            "{name}"
        );
    }
    for (a, b) in small.layers.iter().zip(&big.layers) {
        if a.name.ends_with(".conv") {
            assert_eq!(b.flops, 4 * a.flops, "{}", a.name);
        }
    }
}

#[test]
fn flops_grow_with_psa_count() {
    let f = |p: &[usize]| flops_estimate(&with_placements(p)).unwrap().total;
    assert!(f(&[]) < f(&[2]));
    assert!(f(&[2]) < f(&[1, 2]));
    assert!(f(&[1, 2]) < f(&[0, 1, 2]));
    let r1 = flops_estimate(&ModelConfig {
        attn_ratio: 1.0,
        ..Default::default()
    })
    .unwrap();
    assert!(r1.total > f(&[2]));
    assert_eq!(
        flops_estimate(&ModelConfig::default()).unwrap(),
        flops_estimate(&ModelConfig::default()).unwrap()
    );
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let d = synth_generate(8, 64, 0).unwrap();
    let mut net = ToyNet::build(ModelConfig::default(), 0).unwrap();
    let before = net.clone();
    let opts = TrainOptions {
        epochs: 0,
        ..Default::default()
    };
    let out = train_toy(&mut net, &d.images, &d.targets(), &opts, |_| {}).unwrap();
    assert_eq!(net, before);
    assert!(out.log.is_empty() && out.best_epoch.is_none());
    assert!(train_toy(&mut net, &[], &[], &opts, |_| {}).is_err());
}

#[test]
fn training_keeps_best_epoch_and_is_reproducible() {
    let d = synth_generate(16, 64, 2).unwrap();
    let opts = TrainOptions {
        epochs: 6,
        batch_size: 8,
        seed: 3,
        stop_at: None,
        ..Default::default()
    };
    let run = || {
        let mut net = ToyNet::build(ModelConfig::default(), 3).unwrap();
        let out = train_toy(&mut net, &d.images, &d.targets(), &opts, |_| {}).unwrap();
        (net, out)
    };
    let (net, out) = run();
    let (net2, out2) = run();
    assert_eq!(net, net2);
    assert_eq!(out.log, out2.log);
    assert_eq!(out.log.len(), 6);
    let best = out.best_epoch.unwrap();
    let max = out
        .log
        .iter()
        .map(|e| e.train_map50)
        .fold(f64::MIN, f64::max);
    let first_max = out.log.iter().find(|e| e.train_map50 == max).unwrap().epoch;
    assert_eq!(best, first_max);
    let again = evaluate_map50(&net, &d.images, &d.targets(), 0.01, 0.45).unwrap();
    assert_eq!(again, out.log[best - 1].train_map50);
    assert!(out.to_csv().starts_with("epoch,loss,train_map50\n1,"));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.pvd");
    let net = ToyNet::build(with_placements(&[1, 2]), 6).unwrap();
    net.save(&path).unwrap();
    assert_eq!(ToyNet::load(&path).unwrap(), net);
}

fn random_boxes(seed: u64, n: usize) -> Vec<DetectionBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..0.7);
            let y = rng.gen_range(0.0..0.7);
            DetectionBox {
                image_id: rng.gen_range(0..2),
                class_id: rng.gen_range(0..3),
                confidence: (rng.gen_range(1..10) as f64) / 10.0,
                rect: Rect::new(
                    x,
                    y,
                    x + rng.gen_range(0.05..0.3),
                    y + rng.gen_range(0.05..0.3),
                ),
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nms_is_an_idempotent_subset(seed in any::<u64>(), n in 0usize..40, thr in 0.05f64..=1.0) {
        let boxes = random_boxes(seed, n);
        let once = nms(&boxes, thr);
        prop_assert!(once.iter().all(|b| boxes.contains(b)));
        prop_assert_eq!(nms(&once, thr), once);
    }

    #[test]
    fn decoded_boxes_stay_in_range(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::from_fn(&[2, 12, 8, 8], |_| rng.gen_range(-scale..scale));
        for b in decode(&raw, 0.0, 7).unwrap() {
            prop_assert!((0.0..=1.0).contains(&b.confidence));
            let r = b.rect;
            for v in [r.x_min, r.y_min, r.x_max, r.y_max] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r.is_valid());
        }
    }

    #[test]
    fn loss_is_non_negative(seed in 0u64..1000, scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Tensor::from_fn(&[2, 12, 8, 8], |_| rng.gen_range(-scale..scale));
        let targets = synth_generate(2, 64, seed).unwrap().targets();
        let mut tape = Tape::new();
        let pv = tape.constant(raw);
        let l = detection_loss(&mut tape, pv, &targets, 7).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }
}

#[test]
fn decode_of_forward_stays_in_range() {
    let (x, _) = batch(2, 8);
    for seed in 0..3 {
        let net = ToyNet::build(ModelConfig::default(), seed).unwrap();
        let pred = net.predict(&x).unwrap();
        let boxes = decode(&pred, 0.0, 7).unwrap();
        assert!(boxes
            .iter()
            .all(|b| (0.0..=1.0).contains(&b.confidence) && b.rect.is_valid()));
    }
}
