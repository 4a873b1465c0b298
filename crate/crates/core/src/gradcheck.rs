//! Central-difference verification of reverse-mode gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst coordinate found by a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], trainable: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
    let y = f(&mut g, &vars)?;
    if g.value(y).len() != 1 {
        return shape_err("grad_check", format!("program output must be scalar, got {:?}", g.shape(y)));
    }
    Ok((g, vars, y))
}

/// Checks the gradient of the scalar program `f` with respect to every
/// coordinate of every input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, y) = eval_scalar(&f, inputs, true)?;
    g.backward(y)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), coordinates: 0 };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let x0 = t.data()[i];
            probe[ti].data_mut()[i] = x0 + h;
            let (gp, _, yp) = eval_scalar(&f, &probe, false)?;
            probe[ti].data_mut()[i] = x0 - h;
            let (gm, _, ym) = eval_scalar(&f, &probe, false)?;
            probe[ti].data_mut()[i] = x0;
            let fd = (gp.value(yp).data()[0] - gm.value(ym).data()[0]) / (2.0 * h);
            let ad = analytic[ti].data()[i];
            let denom = 1.0f64.max(libm::fabs(ad)).max(libm::fabs(fd));
            let err = libm::fabs(ad - fd) / denom;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, i);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the maximum relative
/// error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), core::slice::from_ref(x), h).map(|r| r.max_rel_error)
}
