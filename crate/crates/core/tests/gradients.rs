//! Reverse-mode gradients against central differences, h = 1e-5, relative
//! error at most 1e-4, twenty random configurations per op.

mod common;

use common::{rand_tensor, randomize, rng};
use maskrefine_core::gradcheck::{grad_check, grad_check_many, DEFAULT_STEP};
use maskrefine_core::param::{Bound, ParamStore};
use maskrefine_core::refinement::{stack_refine, RefinementConfig, RefinementStack, ScheduleVariant, StackKind};
use maskrefine_core::{ConvSpec, Graph, PadMode, Result, Tensor, Var};
use rand::Rng;

const TOL: f64 = 1e-4;
const CONFIGS: u64 = 20;

/// Contracts `y` with fixed random weights so any output becomes a scalar
/// with a generic gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xabc);
    let w = g.input(rand_tensor(&mut r, g.shape(y)));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_many(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let rep = grad_check_many(f, inputs, DEFAULT_STEP).unwrap();
    assert!(rep.max_rel_error <= TOL, "{}: error {:e} at {:?}", name, rep.max_rel_error, rep.worst);
}

#[test]
fn conv2d_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(seed);
        let n = r.gen_range(1..3);
        let cin = r.gen_range(1..3);
        let cout = r.gen_range(1..3);
        let k = [1, 3][r.gen_range(0..2)];
        let h = r.gen_range(k.max(3)..7);
        let w = r.gen_range(k.max(3)..7);
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        let mode = if seed % 2 == 0 { PadMode::Zero } else { PadMode::Reflect };
        let spec = ConvSpec { stride, pad, mode };
        let inputs = [rand_tensor(&mut r, &[n, cin, h, w]), rand_tensor(&mut r, &[cout, cin, k, k]), rand_tensor(&mut r, &[cout])];
        check_many("conv2d", &inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), spec)?;
            project(g, y, seed)
        });
    }
}

#[test]
fn maxpool_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(100 + seed);
        let shape = [r.gen_range(1..3), r.gen_range(1..3), 2 * r.gen_range(1..4), 2 * r.gen_range(1..4)];
        let x = rand_tensor(&mut r, &shape);
        let e = grad_check(|g, v| { let y = g.maxpool2(v)?; project(g, y, seed) }, &x, DEFAULT_STEP).unwrap();
        assert!(e <= TOL, "maxpool {:?}: {:e}", shape, e);
    }
}

#[test]
fn bilinear_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(200 + seed);
        let shape = [r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5)];
        let x = rand_tensor(&mut r, &shape);
        let e = grad_check(|g, v| { let y = g.bilinear_up2(v)?; project(g, y, seed) }, &x, DEFAULT_STEP).unwrap();
        assert!(e <= TOL, "bilinear {:?}: {:e}", shape, e);
    }
}

#[test]
fn concat_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(300 + seed);
        let (n, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (ca, cb) = (r.gen_range(1..3), r.gen_range(1..3));
        let inputs = [rand_tensor(&mut r, &[n, ca, h, w]), rand_tensor(&mut r, &[n, cb, h, w])];
        check_many("concat", &inputs, |g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            project(g, y, seed)
        });
    }
}

#[test]
fn elementwise_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(400 + seed);
        let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)];
        let a = rand_tensor(&mut r, &shape);
        let b = rand_tensor(&mut r, &shape);
        let s: f64 = r.gen_range(-2.0..2.0);
        let inputs = [a.clone(), b];
        check_many("relu", &[a.clone()], |g, v| { let y = g.relu(v[0])?; project(g, y, seed) });
        check_many("sigmoid", &[a.clone()], |g, v| { let y = g.sigmoid(v[0])?; project(g, y, seed) });
        check_many("scale", &[a.clone()], |g, v| { let y = g.scale(v[0], s)?; project(g, y, seed) });
        check_many("add", &inputs, |g, v| { let y = g.add(v[0], v[1])?; project(g, y, seed) });
        check_many("mul", &inputs, |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, seed) });
        check_many("sum", &[a.clone()], |g, v| g.sum(v[0]));
        check_many("mean", &[a.clone()], |g, v| g.mean(v[0]));
        let flat = shape.iter().product::<usize>();
        check_many("reshape", &[a], |g, v| { let y = g.reshape(v[0], &[flat])?; project(g, y, seed) });
    }
}

#[test]
fn crop_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(500 + seed);
        let (h, w) = (r.gen_range(2..6), r.gen_range(2..6));
        let (ch, cw) = (r.gen_range(1..=h), r.gen_range(1..=w));
        let (y0, x0) = (r.gen_range(0..=h - ch), r.gen_range(0..=w - cw));
        let x = rand_tensor(&mut r, &[1, 2, h, w]);
        let e = grad_check(|g, v| { let y = g.crop(v, y0, x0, ch, cw)?; project(g, y, seed) }, &x, DEFAULT_STEP).unwrap();
        assert!(e <= TOL, "crop: {:e}", e);
    }
}

#[test]
fn linear_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(600 + seed);
        let (n, i, o) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
        let inputs = [rand_tensor(&mut r, &[n, i]), rand_tensor(&mut r, &[o, i]), rand_tensor(&mut r, &[o])];
        check_many("linear", &inputs, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, seed)
        });
    }
}

#[test]
fn loss_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(700 + seed);
        let n = r.gen_range(1..12);
        let z = rand_tensor(&mut r, &[n]);
        let target = Tensor::from_fn(&[n], |_| r.gen_range(0..2) as f64);
        let weights: Vec<f64> = (0..n).map(|_| r.gen_range(0..3) as f64).collect();
        let norm = r.gen_range(1.0..5.0);
        check_many("bce_loss", &[z.clone()], |g, v| {
            let p = g.sigmoid(v[0])?;
            g.bce_loss(p, &target)
        });
        check_many("bce_with_logits", &[z], |g, v| g.bce_with_logits(v[0], target.data(), &weights, norm));
    }
}

#[test]
fn composite_conv_sigmoid_bce() {
    let mut r = rng(800);
    let x = rand_tensor(&mut r, &[1, 1, 4, 4]);
    let w = rand_tensor(&mut r, &[1, 1, 3, 3]);
    let target = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 2) as f64);
    check_many("bce(sigmoid(conv))", &[x, w], |g, v| {
        let y = g.conv2d(v[0], v[1], None, ConvSpec::same3(PadMode::Reflect))?;
        let p = g.sigmoid(y)?;
        g.bce_loss(p, &target)
    });
}

#[test]
fn three_stage_stack_gradients() {
    for seed in 0..CONFIGS {
        let mut r = rng(900 + seed);
        let side = r.gen_range(1..3);
        let n = r.gen_range(1..3);
        let channels = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
        let kind = [StackKind::Full, StackKind::Full, StackKind::SkipOnly, StackKind::NoHorizontal][seed as usize % 4];
        let cfg = RefinementConfig { k: 4, schedule: ScheduleVariant::Halving, skip_hidden: r.gen_range(1..4), kind };
        let mode = if seed % 2 == 0 { PadMode::Zero } else { PadMode::Reflect };
        let mut store = ParamStore::new();
        let stack = RefinementStack::build(&mut store, &mut r, &cfg, &channels, mode).unwrap();
        randomize(&mut store, &mut r, 0.5);
        let k1 = stack.encoding_channels();
        let mut inputs = vec![rand_tensor(&mut r, &[n, k1, side, side])];
        for (i, &c) in channels.iter().enumerate() {
            inputs.push(rand_tensor(&mut r, &[n, c, side << i, side << i]));
        }
        let n_data = inputs.len();
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        // parameters are probed inputs too, in store order
        check_many("stack", &inputs, |g, v| {
            let p = Bound::from_vars(v[n_data..].to_vec());
            let y = stack_refine(g, &p, &stack, v[0], &v[1..n_data])?;
            project(g, y, seed)
        });
    }
}
