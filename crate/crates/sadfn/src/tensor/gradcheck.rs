//! Finite-difference gradient checking.
//!
//! [`grad_check`] compares the analytic gradient of a scalar-valued graph
//! against central finite differences, one input coordinate at a time. It
//! is meant to run in `f64`: in single precision the truncation and
//! round-off error of the differences themselves would dominate.

use super::{Graph, NodeId, Tensor};
use crate::{Error, Real, Result};

/// Relative-error floor: differences below this magnitude are compared
/// absolutely, so near-zero gradients do not blow up the ratio. The floor
/// must sit well above the rounding noise of the differences themselves —
/// about `ulp(|loss|) / (2·eps)`, i.e. ~1e-10 for a loss of order 10 at
/// eps 1e-5 — because a coordinate with an exactly zero gradient (these
/// occur structurally: a residual bias shifts only the k-space DC term,
/// which data fidelity replaces) makes the difference pure noise.
const REL_FLOOR: f64 = 1e-6;

/// Builds a scalar loss from one designated input node.
///
/// The builder is invoked multiple times, each time on a fresh graph, and
/// must be deterministic: any parameters it introduces must be identical
/// across calls (capture them by reference).
pub type LossBuilder<'a, T> = dyn FnMut(&mut Graph<T>, NodeId) -> Result<NodeId> + 'a;

/// Checks the analytic gradient of `builder`'s loss with respect to
/// `input` against central finite differences with step `eps`.
///
/// Returns the maximum over coordinates of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
///
/// Errors if the builder's output is not scalar or evaluates to a
/// non-finite value.
pub fn grad_check<T: Real>(builder: &mut LossBuilder<'_, T>, input: &Tensor<T>, eps: T) -> Result<f64> {
    if !(eps > T::zero()) {
        return Err(Error::Invalid(format!("grad_check: eps must be positive, got {eps}")));
    }

    // Analytic pass.
    let mut g = Graph::new();
    let x = g.leaf(input.clone().requiring_grad());
    let loss = builder(&mut g, x)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Invalid(format!(
            "grad_check: builder must produce a scalar, got shape {:?}",
            g.value(loss).shape()
        )));
    }
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(gr) => gr.iter().map(|&v| Real::to_f64(v)).collect(),
        // No gradient path back to the input: analytic gradient is zero.
        None => vec![0.0; input.len()],
    };

    // Finite differences, one coordinate at a time.
    let mut max_err = 0.0f64;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + eps;
        let f_plus = eval_scalar(builder, &probe)?;
        probe.data_mut()[i] = original - eps;
        let f_minus = eval_scalar(builder, &probe)?;
        probe.data_mut()[i] = original;
        let fd = (f_plus - f_minus) / (2.0 * eps.to_f64());
        let denom = analytic[i].abs().max(fd.abs()).max(REL_FLOOR);
        let err = (analytic[i] - fd).abs() / denom;
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

fn eval_scalar<T: Real>(builder: &mut LossBuilder<'_, T>, input: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone().requiring_grad());
    let loss = builder(&mut g, x)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::Invalid("grad_check: builder must produce a scalar".into()));
    }
    let out = v.data()[0].to_f64();
    if !out.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    Ok(out)
}
