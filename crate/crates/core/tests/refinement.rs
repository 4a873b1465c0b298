//! Refinement modules, the split-kernel refactoring, schedules and the
//! stacked recursion.

mod common;

use common::{rand_tensor, randomize, rng};
use maskrefine_core::param::{Bound, ParamStore};
use maskrefine_core::refinement::*;
use maskrefine_core::{ConvSpec, Graph, PadMode, Tensor, Var};
use rand::Rng;

fn conv_ref(g: &mut Graph, x: Var, store: &ParamStore, prefix: &str, mode: PadMode) -> Var {
    let w = g.input(store.by_name(&format!("{}.weight", prefix)).unwrap().clone());
    let b = g.input(store.by_name(&format!("{}.bias", prefix)).unwrap().clone());
    g.conv2d(x, w, Some(b), ConvSpec::same3(mode)).unwrap()
}

fn one_stage(
    r: &mut maskrefine_core::rng::StreamRng,
    kf: usize,
    k: usize,
    mode: PadMode,
) -> (ParamStore, RefinementStack) {
    let mut store = ParamStore::new();
    let cfg = RefinementConfig { k, schedule: ScheduleVariant::Constant, skip_hidden: 5, kind: StackKind::Full };
    // two stages so stage 0 keeps its ReLU and has k_m' = k
    let stack = RefinementStack::build(&mut store, r, &cfg, &[kf, kf], mode).unwrap();
    randomize(&mut store, r, 0.7);
    (store, stack)
}

#[test]
fn schedules() {
    assert_eq!(make_schedule(32, ScheduleVariant::Halving, 4).unwrap().mask_widths(), [32, 16, 8, 4]);
    let c = make_schedule(8, ScheduleVariant::Constant, 3).unwrap();
    assert_eq!(c.mask_widths(), [8, 8, 8]);
    assert_eq!(c.skip_widths(), [8, 8, 8]);
    assert!(make_schedule(4, ScheduleVariant::Halving, 4).is_err());
    assert!(make_schedule(0, ScheduleVariant::Constant, 2).is_err());
    let h = make_schedule(16, ScheduleVariant::Halving, 3).unwrap();
    assert_eq!(h.skip_widths(), h.mask_widths());
    assert_eq!((h.input_width(), h.output_width(0), h.output_width(2)), (16, 8, 1));
}

#[test]
fn merge_conv_takes_mask_plus_skip_channels() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let cfg = RefinementConfig { k: 8, schedule: ScheduleVariant::Halving, skip_hidden: 4, kind: StackKind::Full };
    let stack = RefinementStack::build(&mut store, &mut r, &cfg, &[6, 5, 3], PadMode::Reflect).unwrap();
    for m in &stack.modules {
        let merge = m.merge.unwrap();
        assert_eq!(merge.in_channels, m.mask_channels + m.skip_channels);
        assert_eq!(store.get(merge.weight).shape()[1], m.mask_channels + m.skip_channels);
    }
    assert_eq!(stack.modules.last().unwrap().out_channels, 1);
    // every stage has its own parameters
    let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
    for i in 0..3 {
        assert_eq!(names.iter().filter(|n| n.starts_with(&format!("refine.{}.", i))).count(), 6);
    }
    assert!(store.by_name("refine.2.merge.bias").is_some());
}

#[test]
fn skip_path_examples() {
    let mut r = rng(2);
    let (mut store, stack) = one_stage(&mut r, 3, 4, PadMode::Reflect);
    let m = &stack.modules[0];
    // zero features and zero biases give zero skip features
    let biases: Vec<String> = store.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with("bias")).collect();
    let mut zeroed = store.clone();
    for n in &biases {
        let shape = zeroed.by_name(n).unwrap().shape().to_vec();
        zeroed.set(n, Tensor::zeros(&shape)).unwrap();
    }
    let mut g = Graph::new();
    let p = zeroed.bind(&mut g, |_| false);
    let f = g.input(Tensor::zeros(&[2, 3, 5, 4]));
    let s = make_skip(&mut g, &p, f, m).unwrap();
    assert_eq!(g.shape(s), [2, 4, 5, 4]);
    assert!(g.value(s).data().iter().all(|&v| v == 0.0));

    // two-conv oracle pipeline
    randomize(&mut store, &mut r, 0.7);
    for (h, w) in [(3, 3), (6, 5), (9, 4)] {
        let x = rand_tensor(&mut r, &[1, 3, h, w]);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let f = g.input(x);
        let s = make_skip(&mut g, &p, f, m).unwrap();
        let a = conv_ref(&mut g, f, &store, "refine.0.skip_a", PadMode::Reflect);
        let a = g.relu(a).unwrap();
        let b = conv_ref(&mut g, a, &store, "refine.0.skip_b", PadMode::Reflect);
        let b = g.relu(b).unwrap();
        assert_eq!(g.shape(s), [1, 4, h, w]);
        assert!(g.value(s).max_abs_diff(g.value(b)) < 1e-13);
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let bad = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    assert!(make_skip(&mut g, &p, bad, m).is_err());
}

#[test]
fn refine_doubles_resolution() {
    let mut r = rng(3);
    let (store, stack) = one_stage(&mut r, 3, 4, PadMode::Reflect);
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let mask = g.input(rand_tensor(&mut r, &[1, 4, 10, 10]));
    let skip = g.input(rand_tensor(&mut r, &[1, 4, 10, 10]));
    let y = refine(&mut g, &p, mask, skip, &stack.modules[0]).unwrap();
    assert_eq!(g.shape(y), [1, 4, 20, 20]);
    let wrong = g.input(Tensor::zeros(&[1, 4, 9, 10]));
    assert!(refine(&mut g, &p, mask, wrong, &stack.modules[0]).is_err());
}

#[test]
fn refine_of_zeros_with_zero_bias_is_zero() {
    let mut r = rng(4);
    let (mut store, stack) = one_stage(&mut r, 3, 4, PadMode::Zero);
    store.set("refine.0.merge.bias", Tensor::zeros(&[4])).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let z = g.input(Tensor::zeros(&[1, 4, 6, 6]));
    let y = refine(&mut g, &p, z, z, &stack.modules[0]).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

/// One equivalence draw: random widths, parameters and inputs, comparing
/// the concatenated-merge module with its split form, forward and backward.
fn equivalence_trial(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let kf = r.gen_range(1..5);
    let k = r.gen_range(1..6);
    let mode = if r.gen::<bool>() { PadMode::Zero } else { PadMode::Reflect };
    let last = r.gen::<bool>();
    let mut store = ParamStore::new();
    let cfg = RefinementConfig { k, schedule: ScheduleVariant::Constant, skip_hidden: r.gen_range(1..6), kind: StackKind::Full };
    let feats: &[usize] = if last { &[kf] } else { &[kf, kf] };
    let stack = RefinementStack::build(&mut store, &mut r, &cfg, feats, mode).unwrap();
    randomize(&mut store, &mut r, 1.0);
    let module = &stack.modules[0];
    let mut split = ParamStore::new();
    let refactored = refactor_module(module, &store, &mut split, "rf").unwrap();

    let (n, h, w) = (r.gen_range(1..3), r.gen_range(2..7), r.gen_range(2..7));
    let m_in = rand_tensor(&mut r, &[n, k, h, w]);
    let f_in = rand_tensor(&mut r, &[n, kf, h, w]);
    let proj = rand_tensor(&mut r, &[n, module.out_channels, 2 * h, 2 * w]);

    let run = |orig: bool| -> (Tensor, Tensor, Tensor) {
        let mut g = Graph::new();
        let p: Bound = if orig { store.bind(&mut g, |_| false) } else { split.bind(&mut g, |_| false) };
        let mv = g.param(m_in.clone());
        let fv = g.param(f_in.clone());
        let y = if orig {
            let s = make_skip(&mut g, &p, fv, module).unwrap();
            refine(&mut g, &p, mv, s, module).unwrap()
        } else {
            let s = make_skip_refactored(&mut g, &p, fv, &refactored).unwrap();
            refine_refactored(&mut g, &p, mv, s, &refactored).unwrap()
        };
        let pv = g.input(proj.clone());
        let l = g.mul(y, pv).unwrap();
        let l = g.sum(l).unwrap();
        g.backward(l).unwrap();
        (g.value(y).clone(), g.grad_tensor(mv), g.grad_tensor(fv))
    };
    let (ya, gma, gfa) = run(true);
    let (yb, gmb, gfb) = run(false);
    (ya.max_abs_diff(&yb), gma.max_abs_diff(&gmb).max(gfa.max_abs_diff(&gfb)))
}

#[test]
fn refactored_module_is_equivalent() {
    for seed in 0..100 {
        let (fwd, bwd) = equivalence_trial(seed);
        assert!(fwd <= 1e-9, "seed {} forward {:e}", seed, fwd);
        assert!(bwd <= 1e-8, "seed {} backward {:e}", seed, bwd);
    }
}

#[test]
fn refactored_branches_are_additive() {
    let mut r = rng(5);
    let (store, stack) = one_stage(&mut r, 2, 3, PadMode::Reflect);
    let mut split = ParamStore::new();
    let rf = refactor_module(&stack.modules[0], &store, &mut split, "rf").unwrap();
    let m = rand_tensor(&mut r, &[1, 3, 4, 4]);
    let s1 = rand_tensor(&mut r, &[1, 3, 4, 4]);
    let s2 = rand_tensor(&mut r, &[1, 3, 4, 4]);
    let run = |mask: &Tensor, skip: &Tensor, zero_mask_branch: bool| {
        let mut sp = split.clone();
        if zero_mask_branch {
            let shape = sp.get(rf.mask_conv.weight).shape().to_vec();
            sp.set("rf.mask.weight", Tensor::zeros(&shape)).unwrap();
        } else {
            let shape = sp.get(rf.skip_merge_conv.weight).shape().to_vec();
            sp.set("rf.skip_merge.weight", Tensor::zeros(&shape)).unwrap();
        }
        let mut g = Graph::new();
        let p = sp.bind(&mut g, |_| false);
        let (mv, sv) = (g.input(mask.clone()), g.input(skip.clone()));
        let y = refine_refactored(&mut g, &p, mv, sv, &rf).unwrap();
        g.value(y).clone()
    };
    // skip branch zeroed: output ignores the skip input
    assert_eq!(run(&m, &s1, false), run(&m, &s2, false));
    // mask branch zeroed: output ignores the mask input
    assert_eq!(run(&s1, &m, true), run(&s2, &m, true));
}

fn stack_output(stack: &RefinementStack, store: &ParamStore, m1: &Tensor, feats: &[Tensor]) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let m = g.input(m1.clone());
    let f: Vec<Var> = feats.iter().map(|t| g.input(t.clone())).collect();
    let y = stack_refine(&mut g, &p, stack, m, &f).unwrap();
    g.value(y).clone()
}

#[test]
fn stack_restores_input_resolution() {
    let mut r = rng(6);
    for (side, stages) in [(8usize, 3usize), (10, 4), (2, 3), (1, 5)] {
        let mut store = ParamStore::new();
        let chans: Vec<usize> = (0..stages).map(|_| r.gen_range(1..4)).collect();
        let cfg = RefinementConfig { k: 16, schedule: ScheduleVariant::Halving, skip_hidden: 3, kind: StackKind::Full };
        let stack = RefinementStack::build(&mut store, &mut r, &cfg, &chans, PadMode::Reflect).unwrap();
        let m1 = rand_tensor(&mut r, &[1, stack.encoding_channels(), side, side]);
        let feats: Vec<Tensor> = chans.iter().enumerate().map(|(i, &c)| rand_tensor(&mut r, &[1, c, side << i, side << i])).collect();
        let y = stack_output(&stack, &store, &m1, &feats);
        assert_eq!(y.shape(), [1, 1, side << stages, side << stages]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn empty_stack_is_sigmoid_of_the_encoding() {
    let mut store = ParamStore::new();
    let stack = RefinementStack::build(&mut store, &mut rng(7), &RefinementConfig::default(), &[], PadMode::Zero).unwrap();
    let m1 = rand_tensor(&mut rng(8), &[1, 1, 4, 4]);
    let y = stack_output(&stack, &store, &m1, &[]);
    let want = Tensor::from_fn(&[1, 1, 4, 4], |i| 1.0 / (1.0 + (-m1.data()[i]).exp()));
    assert!(y.max_abs_diff(&want) < 1e-15);
}

#[test]
fn stack_rejects_inconsistent_features() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let stack = RefinementStack::build(&mut store, &mut r, &RefinementConfig::default(), &[2, 2, 2], PadMode::Zero).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let m = g.input(Tensor::zeros(&[1, 16, 4, 4]));
    let f: Vec<Var> = [4, 8, 8].iter().map(|&s| g.input(Tensor::zeros(&[1, 2, s, s]))).collect();
    assert!(stack_refine(&mut g, &p, &stack, m, &f).is_err());
    assert!(stack_refine(&mut g, &p, &stack, m, &f[..2]).is_err());
}

#[test]
fn ablations() {
    let mut r = rng(10);
    let chans = [3, 2, 2];
    let build = |kind: StackKind, r: &mut maskrefine_core::rng::StreamRng| {
        let mut store = ParamStore::new();
        let cfg = RefinementConfig { k: 4, schedule: ScheduleVariant::Halving, skip_hidden: 3, kind };
        let stack = RefinementStack::build(&mut store, r, &cfg, &chans, PadMode::Reflect).unwrap();
        randomize(&mut store, r, 0.5);
        (store, stack)
    };
    let feats = |r: &mut maskrefine_core::rng::StreamRng, uniform: bool| -> Vec<Tensor> {
        chans
            .iter()
            .enumerate()
            .map(|(i, &c)| if uniform { Tensor::full(&[1, c, 4 << i, 4 << i], 0.3) } else { rand_tensor(r, &[1, c, 4 << i, 4 << i]) })
            .collect()
    };

    // skip-only: single-channel everything, uniform in -> uniform out
    let (store, stack) = build(StackKind::SkipOnly, &mut r);
    assert_eq!(stack.schedule.mask_widths(), [1, 1, 1]);
    assert!(stack.modules.iter().all(|m| m.merge.is_none()));
    let y = stack_output(&stack, &store, &Tensor::full(&[1, 1, 4, 4], -0.2), &feats(&mut r, true));
    assert_eq!(y.shape(), [1, 1, 32, 32]);
    assert!(y.data().iter().all(|&v| (v - y.data()[0]).abs() < 1e-12));
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let m = g.input(Tensor::zeros(&[1, 1, 4, 4]));
    let f: Vec<Var> = feats(&mut r, false).into_iter().map(|t| g.input(t)).collect();
    assert!(ablation_skip_only(&mut g, &p, &stack, m, &f).is_ok());
    assert!(ablation_no_horizontal(&mut g, &p, &stack, m, &f).is_err());

    // no-horizontal: equals the full stack's mask path with zero skips
    let (store, stack) = build(StackKind::NoHorizontal, &mut r);
    assert!(stack.modules.iter().all(|m| m.skip_a.is_none()));
    let m1 = rand_tensor(&mut r, &[1, 4, 4, 4]);
    let fs = feats(&mut r, false);
    let y = stack_output(&stack, &store, &m1, &fs);
    assert_eq!(y.shape(), [1, 1, 32, 32]);
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let mut m = g.input(m1.clone());
    for module in &stack.modules {
        let side = g.shape(m)[2];
        let z = g.input(Tensor::zeros(&[1, module.skip_channels, side, side]));
        m = refine(&mut g, &p, m, z, module).unwrap();
    }
    let by_hand = g.sigmoid(m).unwrap();
    assert!(g.value(by_hand).max_abs_diff(&y) < 1e-15);
    // features are ignored entirely
    assert_eq!(stack_output(&stack, &store, &m1, &feats(&mut r, false)), y);
}
