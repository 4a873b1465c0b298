//! Joint loss, the two training stages and single-trunk dual inference.

mod common;

use common::rng;
use maskrefine_core::metrics::BinaryMask;
use maskrefine_core::network::*;
use maskrefine_core::synth::{make_dataset, SampleConfig};
use maskrefine_core::train::*;
use maskrefine_core::{Error, Graph, OpKind, PadMode, Tensor};
use rand::Rng;

const LN2: f64 = core::f64::consts::LN_2;

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.trunk = TrunkConfig {
        width: 32,
        pools: 3,
        depth: 4,
        features: 4,
        base_channels: 2,
        channels: None,
        in_channels: 1,
        context: 8,
        pad_mode: PadMode::Reflect,
    };
    cfg.head = HeadConfig { variant: HeadVariant::C, reduce: 2, hidden: 8, score_hidden: 8 };
    cfg.refinement.k = 4;
    cfg.refinement.skip_hidden = 2;
    cfg
}

fn tiny_data() -> maskrefine_core::synth::Dataset {
    make_dataset(&SampleConfig::for_width(32, 8), 3, 40, 10).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig { epochs_stage1: 1, epochs_stage2: 1, batch_size: 8, lr_stage2: 1e-2, ..TrainConfig::default() }
}

fn bits(m: &Model) -> Vec<(String, Vec<u64>)> {
    m.params.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[test]
fn loss_joint_examples() {
    let mut g = Graph::new();
    let m = g.input(Tensor::zeros(&[2, 1, 2, 2]));
    let s = g.input(Tensor::zeros(&[2, 1]));
    let mask = BinaryMask::from_fn(2, 2, |x, _| x == 0);
    let l = loss_joint(&mut g, m, &[None, None], s, &[-1, -1], 0.5).unwrap();
    assert!((g.value(l).data()[0] - 0.5 * LN2).abs() < 1e-15);
    let l = loss_joint(&mut g, m, &[Some(&mask), None], s, &[1, -1], 0.5).unwrap();
    assert!((g.value(l).data()[0] - 1.5 * LN2).abs() < 1e-15);
    assert!(loss_joint(&mut g, m, &[None, None], s, &[1, -1], 0.5).is_err());
    assert!(loss_joint(&mut g, m, &[None], s, &[-1], 0.5).is_err());
}

#[test]
fn loss_joint_matches_direct_formula() {
    let mut r = rng(4);
    for _ in 0..20 {
        let (n, side) = (r.gen_range(1..5), r.gen_range(1..5));
        let labels: Vec<i8> = (0..n).map(|_| if r.gen_bool(0.5) { 1 } else { -1 }).collect();
        let masks: Vec<BinaryMask> = (0..n).map(|_| BinaryMask::from_fn(side, side, |_, _| r.gen_bool(0.5))).collect();
        let logits = Tensor::from_fn(&[n, 1, side, side], |_| r.gen_range(-3.0..3.0));
        let scores = Tensor::from_fn(&[n, 1], |_| r.gen_range(-3.0..3.0));
        let lambda = r.gen_range(0.01..1.0);

        let (mut mask_sum, mut pos) = (0.0, 0);
        let mut score_sum = 0.0;
        for i in 0..n {
            let y = if labels[i] > 0 { 1.0 } else { 0.0 };
            let z = scores.data()[i];
            score_sum += softplus(z) - y * z;
            if labels[i] > 0 {
                pos += 1;
                for (k, &b) in masks[i].bits().iter().enumerate() {
                    let z = logits.data()[i * side * side + k];
                    mask_sum += softplus(z) - if b { z } else { 0.0 };
                }
            }
        }
        let mut want = lambda * score_sum / n as f64;
        if pos > 0 {
            want += mask_sum / (pos * side * side) as f64;
        }

        let mut g = Graph::new();
        let m = g.param(logits);
        let s = g.param(scores);
        let refs: Vec<Option<&BinaryMask>> = masks.iter().zip(&labels).map(|(m, &y)| (y > 0).then_some(m)).collect();
        let l = loss_joint(&mut g, m, &refs, s, &labels, lambda).unwrap();
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
        g.backward(l).unwrap();
        // negatives contribute nothing to the mask gradient
        let grad = g.grad(m).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n * side * side]);
        for i in (0..n).filter(|&i| labels[i] < 0) {
            assert!(grad[i * side * side..(i + 1) * side * side].iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::default().lr_stage2, 1e-3);
    for bad in [
        TrainConfig { lr_stage1: 0.0, ..TrainConfig::default() },
        TrainConfig { lr_stage2: -1.0, ..TrainConfig::default() },
        TrainConfig { lambda: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn stage1_smoke() {
    let d = tiny_data();
    let mut m = Model::new(tiny_config(), 1).unwrap();
    let before = evaluate_loss(&m, &d.train, 1, quick().lambda, 16).unwrap();
    let cfg = TrainConfig { epochs_stage1: 3, validate_every_epoch: true, ..quick() };
    let st = train_stage1(&mut m, &d.train, &d.val, &cfg).unwrap();
    assert_eq!((st.stage, st.epoch, st.epoch_losses.len()), (1, 3, 3));
    assert_eq!(st.log.len(), 6);
    assert!(st.frozen.iter().all(|n| is_refinement_param(n)));
    assert!(st.epoch_losses.iter().all(|l| l.is_finite()));
    let after = evaluate_loss(&m, &d.train, 1, quick().lambda, 16).unwrap();
    assert!(after < before, "{} -> {}", before, after);
    let ev = evaluate(&m, &d.val, MaskMode::Coarse, 4).unwrap();
    assert!((0.0..=1.0).contains(&ev.score_accuracy));
    assert_eq!(ev.positives, d.val.iter().filter(|s| s.is_positive()).count());

    let mut refined = Model::new_refined(tiny_config(), 1).unwrap();
    assert!(train_stage1(&mut refined, &d.train, &d.val, &quick()).is_err());
}

#[test]
fn stage2_freezes_everything_but_refinement() {
    let d = tiny_data();
    let mut m = Model::new(tiny_config(), 2).unwrap();
    train_stage1(&mut m, &d.train, &d.val, &quick()).unwrap();
    let before = bits(&m);
    let st = train_stage2(&mut m, &d.train, &d.val, &quick()).unwrap();
    assert_eq!(m.mode(), Mode::Refined);
    let after = bits(&m);
    for (name, b) in &before {
        let a = &after.iter().find(|(n, _)| n == name).unwrap().1;
        assert_eq!(a, b, "{} changed in stage 2", name);
    }
    let frozen: Vec<&String> = before.iter().map(|(n, _)| n).collect();
    assert_eq!(st.frozen.iter().collect::<Vec<_>>(), frozen);
    let changed = after.iter().filter(|(n, _)| is_refinement_param(n)).filter(|(n, a)| {
        let fresh = Model::new_refined(tiny_config(), 2).unwrap();
        fresh.params.by_name(n).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>() != *a
    });
    assert!(changed.count() > 0);

    // frozen parameters receive no gradient at all
    let mut g = Graph::new();
    let p = m.bind(&mut g, is_refinement_param);
    let x = g.input(maskrefine_core::train::batch_patches(&d.train, &[0, 1]).unwrap());
    let (mask, _) = m.forward_refined(&mut g, &p, x).unwrap();
    let l = g.sum(mask).unwrap();
    g.backward(l).unwrap();
    for ((name, _), &v) in m.params.iter().zip(p.vars()) {
        assert_eq!(g.grad(v).is_some(), is_refinement_param(name), "{}", name);
    }
}

#[test]
fn training_is_deterministic() {
    let d = tiny_data();
    let run = || {
        let mut m = Model::new(tiny_config(), 5).unwrap();
        let a = train_stage1(&mut m, &d.train, &d.val, &quick()).unwrap();
        let b = train_stage2(&mut m, &d.train, &d.val, &quick()).unwrap();
        (bits(&m), a, b)
    };
    assert_eq!(run(), run());
}

#[test]
fn dual_inference_runs_trunk_once() {
    let d = tiny_data();
    let mut r = rng(6);
    for pools in [2, 3] {
        let mut cfg = tiny_config();
        cfg.trunk.pools = pools;
        cfg.trunk.depth = pools + 1;
        let mut m = Model::new_refined(cfg, 6).unwrap();
        common::randomize(&mut m.params, &mut r, 0.3);
        let patch = &d.val[0].patch;
        let dual = dual_inference(&m, patch).unwrap();
        assert_eq!(dual.pool_ops, pools);
        assert_eq!(dual.coarse.shape(), &[32, 32]);

        let mut g = Graph::new();
        let p = m.bind_frozen(&mut g);
        let x = g.input(patch.clone().reshape(&[1, 1, 48, 48]).unwrap());
        let (coarse, score) = m.forward_coarse(&mut g, &p, x).unwrap();
        let (refined, score2) = m.forward_refined(&mut g, &p, x).unwrap();
        assert_eq!(g.value(coarse).data(), dual.coarse.data());
        assert_eq!(g.value(refined).data(), dual.refined.data());
        assert_eq!(g.value(score).data()[0], dual.score);
        assert_eq!(g.value(score2).data()[0], dual.score);
        assert_eq!(g.count_ops(OpKind::MaxPool2), 2 * pools);
    }
    assert!(dual_inference(&Model::new(tiny_config(), 0).unwrap(), &d.val[0].patch).is_err());
}

#[test]
fn divergence_is_reported() {
    let d = tiny_data();
    let mut m = Model::new(tiny_config(), 7).unwrap();
    let cfg = TrainConfig { lr_stage1: 1e4, epochs_stage1: 2, ..quick() };
    match train_stage1(&mut m, &d.train, &d.val, &cfg) {
        Err(Error::Diverged { stage: 1, .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|s| s.epoch_losses)),
    }
}

#[test]
fn predictions_and_patch_metrics() {
    let d = tiny_data();
    // perfect predictions give IoU 1, AR 1 and full score accuracy
    let preds: Vec<(Tensor, f64)> = d
        .val
        .iter()
        .map(|s| {
            let m = match &s.mask {
                Some(m) => Tensor::from_fn(&[32, 32], |i| if m.bits()[i] { 1.0 } else { 0.0 }),
                None => Tensor::zeros(&[32, 32]),
            };
            (m, s.label as f64)
        })
        .collect();
    let ev = evaluate_predictions(&d.val, &preds, 0.2).unwrap();
    assert_eq!((ev.mean_iou, ev.ar, ev.score_accuracy), (Some(1.0), Some(1.0), 1.0));
    assert!(evaluate_predictions(&d.val[1..], &preds, 0.2).is_err());
}
