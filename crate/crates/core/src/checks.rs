//! Self-checks runnable outside the test harness: finite-difference
//! gradient checks over every differentiable op, and the equivalence of the
//! concatenated-merge refinement module with its split form.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gradcheck::{grad_check_many, DEFAULT_STEP};
use crate::graph::{ConvSpec, Graph, PadMode, Var};
use crate::param::{Bound, ParamStore};
use crate::refinement::{
    make_skip, make_skip_refactored, refactor_module, refine, refine_refactored, stack_refine, RefinementConfig,
    RefinementStack, ScheduleVariant, StackKind,
};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// Worst relative error of one op over its random configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub configs: usize,
    pub max_rel_error: f64,
}

fn rand_tensor(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore, r: &mut StreamRng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = r.gen_range(-scale..scale);
        }
    }
}

// Contracts an output with fixed random weights into a scalar.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.input(w.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Suite {
    checks: Vec<OpCheck>,
}

impl Suite {
    fn record(&mut self, op: &str, err: f64) {
        match self.checks.iter_mut().find(|c| c.op == op) {
            Some(c) => {
                c.configs += 1;
                c.max_rel_error = c.max_rel_error.max(err);
            }
            None => self.checks.push(OpCheck { op: op.to_string(), configs: 1, max_rel_error: err }),
        }
    }

    /// Checks `f(inputs)` contracted with random weights of the output shape.
    fn check_projected<F>(&mut self, op: &str, r: &mut StreamRng, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        let w = rand_tensor(r, g.shape(y));
        let rep = grad_check_many(
            |g, v| {
                let y = f(g, v)?;
                project(g, y, &w)
            },
            inputs,
            DEFAULT_STEP,
        )?;
        self.record(op, rep.max_rel_error);
        Ok(())
    }

    fn check_scalar<F>(&mut self, op: &str, inputs: &[Tensor], f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let rep = grad_check_many(f, inputs, DEFAULT_STEP)?;
        self.record(op, rep.max_rel_error);
        Ok(())
    }
}

/// Runs `configs` random configurations of every differentiable op plus a
/// three-stage refinement stack (parameters included in the probe).
pub fn gradient_suite(configs: usize, seed: u64) -> Result<Vec<OpCheck>> {
    let mut s = Suite { checks: Vec::new() };
    for c in 0..configs as u64 {
        let r = &mut rng::stream(seed, 1000 + c);

        let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..3));
        let k = [1, 3][r.gen_range(0..2)];
        let (h, w) = (r.gen_range(k.max(3)..7), r.gen_range(k.max(3)..7));
        let mode = if c % 2 == 0 { PadMode::Zero } else { PadMode::Reflect };
        let spec = ConvSpec { stride: r.gen_range(1..3), pad: r.gen_range(0..2), mode };
        let inputs = [rand_tensor(r, &[n, cin, h, w]), rand_tensor(r, &[cout, cin, k, k]), rand_tensor(r, &[cout])];
        s.check_projected("conv2d", r, &inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec))?;

        let shape = [r.gen_range(1..3), r.gen_range(1..3), 2 * r.gen_range(1..4), 2 * r.gen_range(1..4)];
        let x = rand_tensor(r, &shape);
        s.check_projected("maxpool2", r, &[x], |g, v| g.maxpool2(v[0]))?;

        let shape = [r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5)];
        let x = rand_tensor(r, &shape);
        s.check_projected("bilinear_up2", r, &[x], |g, v| g.bilinear_up2(v[0]))?;

        let (n, h, w) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (ca, cb) = (r.gen_range(1..3), r.gen_range(1..3));
        let inputs = [rand_tensor(r, &[n, ca, h, w]), rand_tensor(r, &[n, cb, h, w])];
        s.check_projected("concat_channels", r, &inputs, |g, v| g.concat_channels(v[0], v[1]))?;

        let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4)];
        let (a, b) = (rand_tensor(r, &shape), rand_tensor(r, &shape));
        let k: f64 = r.gen_range(-2.0..2.0);
        let flat = shape.iter().product::<usize>();
        s.check_projected("relu", r, &[a.clone()], |g, v| g.relu(v[0]))?;
        s.check_projected("sigmoid", r, &[a.clone()], |g, v| g.sigmoid(v[0]))?;
        s.check_projected("scale", r, &[a.clone()], |g, v| g.scale(v[0], k))?;
        s.check_projected("add", r, &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))?;
        s.check_projected("mul", r, &[a.clone(), b], |g, v| g.mul(v[0], v[1]))?;
        s.check_projected("reshape", r, &[a.clone()], |g, v| g.reshape(v[0], &[flat]))?;
        s.check_scalar("sum", &[a.clone()], |g, v| g.sum(v[0]))?;
        s.check_scalar("mean", &[a], |g, v| g.mean(v[0]))?;

        let (h, w) = (r.gen_range(2..6), r.gen_range(2..6));
        let (ch, cw) = (r.gen_range(1..=h), r.gen_range(1..=w));
        let (y0, x0) = (r.gen_range(0..=h - ch), r.gen_range(0..=w - cw));
        let x = rand_tensor(r, &[1, 2, h, w]);
        s.check_projected("crop", r, &[x], |g, v| g.crop(v[0], y0, x0, ch, cw))?;

        let (n, i, o) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
        let inputs = [rand_tensor(r, &[n, i]), rand_tensor(r, &[o, i]), rand_tensor(r, &[o])];
        s.check_projected("linear", r, &inputs, |g, v| g.linear(v[0], v[1], Some(v[2])))?;

        let n = r.gen_range(1..12);
        let z = rand_tensor(r, &[n]);
        let target = Tensor::from_fn(&[n], |_| r.gen_range(0..2) as f64);
        let weights: Vec<f64> = (0..n).map(|_| r.gen_range(0..3) as f64).collect();
        let norm = r.gen_range(1.0..5.0);
        s.check_scalar("bce_loss", &[z.clone()], |g, v| {
            let p = g.sigmoid(v[0])?;
            g.bce_loss(p, &target)
        })?;
        s.check_scalar("bce_with_logits", &[z], |g, v| g.bce_with_logits(v[0], target.data(), &weights, norm))?;

        stack_check(&mut s, r, c)?;
    }
    Ok(s.checks)
}

fn stack_check(s: &mut Suite, r: &mut StreamRng, c: u64) -> Result<()> {
    let side = r.gen_range(1..3);
    let n = r.gen_range(1..3);
    let channels = [r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)];
    let kind = [StackKind::Full, StackKind::Full, StackKind::SkipOnly, StackKind::NoHorizontal][c as usize % 4];
    let cfg = RefinementConfig { k: 4, schedule: ScheduleVariant::Halving, skip_hidden: r.gen_range(1..4), kind };
    let mode = if c % 2 == 0 { PadMode::Zero } else { PadMode::Reflect };
    let mut store = ParamStore::new();
    let stack = RefinementStack::build(&mut store, r, &cfg, &channels, mode)?;
    randomize(&mut store, r, 0.5);
    let mut inputs = vec![rand_tensor(r, &[n, stack.encoding_channels(), side, side])];
    for (i, &ch) in channels.iter().enumerate() {
        inputs.push(rand_tensor(r, &[n, ch, side << i, side << i]));
    }
    let n_data = inputs.len();
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let op = match kind {
        StackKind::Full => "refinement_stack",
        StackKind::SkipOnly => "refinement_stack_skip_only",
        StackKind::NoHorizontal => "refinement_stack_no_horizontal",
    };
    s.check_projected(op, r, &inputs, |g, v| {
        let p = Bound::from_vars(v[n_data..].to_vec());
        stack_refine(g, &p, &stack, v[0], &v[1..n_data])
    })
}

/// Largest disagreement between the two refinement forms over all trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    /// Max absolute output difference.
    pub max_forward: f64,
    /// Max absolute difference of the input gradients.
    pub max_backward: f64,
}

/// One draw: random widths, parameters and inputs; returns the forward and
/// backward max-abs differences.
pub fn equivalence_trial(seed: u64, trial: u64) -> Result<(f64, f64)> {
    let r = &mut rng::stream(seed, 2000 + trial);
    let kf = r.gen_range(1..5);
    let k = r.gen_range(1..6);
    let mode = if r.gen::<bool>() { PadMode::Zero } else { PadMode::Reflect };
    let last = r.gen::<bool>();
    let cfg = RefinementConfig { k, schedule: ScheduleVariant::Constant, skip_hidden: r.gen_range(1..6), kind: StackKind::Full };
    let feats: &[usize] = if last { &[kf] } else { &[kf, kf] };
    let mut store = ParamStore::new();
    let stack = RefinementStack::build(&mut store, r, &cfg, feats, mode)?;
    randomize(&mut store, r, 1.0);
    let module = &stack.modules[0];
    let mut split = ParamStore::new();
    let refactored = refactor_module(module, &store, &mut split, "rf")?;

    let (n, h, w) = (r.gen_range(1..3), r.gen_range(2..7), r.gen_range(2..7));
    let m_in = rand_tensor(r, &[n, k, h, w]);
    let f_in = rand_tensor(r, &[n, kf, h, w]);
    let proj = rand_tensor(r, &[n, module.out_channels, 2 * h, 2 * w]);

    let run = |orig: bool| -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = if orig { store.bind(&mut g, |_| false) } else { split.bind(&mut g, |_| false) };
        let mv = g.param(m_in.clone());
        let fv = g.param(f_in.clone());
        let y = if orig {
            let s = make_skip(&mut g, &p, fv, module)?;
            refine(&mut g, &p, mv, s, module)?
        } else {
            let s = make_skip_refactored(&mut g, &p, fv, &refactored)?;
            refine_refactored(&mut g, &p, mv, s, &refactored)?
        };
        let l = project(&mut g, y, &proj)?;
        g.backward(l)?;
        Ok((g.value(y).clone(), g.grad_tensor(mv), g.grad_tensor(fv)))
    };
    let (ya, gma, gfa) = run(true)?;
    let (yb, gmb, gfb) = run(false)?;
    Ok((ya.max_abs_diff(&yb), gma.max_abs_diff(&gmb).max(gfa.max_abs_diff(&gfb))))
}

pub fn equivalence_suite(trials: usize, seed: u64) -> Result<EquivalenceReport> {
    let mut rep = EquivalenceReport { trials, max_forward: 0.0, max_backward: 0.0 };
    for t in 0..trials as u64 {
        let (f, b) = equivalence_trial(seed, t)?;
        rep.max_forward = rep.max_forward.max(f);
        rep.max_backward = rep.max_backward.max(b);
    }
    Ok(rep)
}
