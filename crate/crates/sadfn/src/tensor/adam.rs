//! Adam optimizer with bias correction.
//!
//! The optimizer is deliberately decoupled from parameter storage: callers
//! iterate over their named parameters and feed `(name, values, gradient)`
//! triples to [`Adam::update`]. First and second moment buffers are kept
//! per name inside the optimizer, so the same instance must be used across
//! steps for the trajectory to be correct.

use crate::{Error, Real, Result};
use indexmap::IndexMap;

/// Adam state: hyperparameters, step counter, and per-parameter moments.
pub struct Adam<T: Real> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// Creates an optimizer with the given learning rate and decay rates
    /// and the conventional epsilon of 1e-8.
    pub fn new(lr: T, beta1: T, beta2: T) -> Result<Self> {
        Self::with_eps(lr, beta1, beta2, T::from_f64(1e-8))
    }

    /// Creates an optimizer with an explicit epsilon.
    pub fn with_eps(lr: T, beta1: T, beta2: T, eps: T) -> Result<Self> {
        if !(lr > T::zero()) || !lr.is_finite() {
            return Err(Error::Invalid(format!("Adam: learning rate must be positive, got {lr}")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(b >= T::zero() && b < T::one()) {
                return Err(Error::Invalid(format!("Adam: {name} must be in [0, 1), got {b}")));
            }
        }
        if !(eps > T::zero()) {
            return Err(Error::Invalid(format!("Adam: eps must be positive, got {eps}")));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        })
    }

    /// Advances the shared step counter; call once per optimization step,
    /// before the updates of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Number of completed/ongoing steps.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one Adam update to `param` given its gradient.
    ///
    /// Rejects non-finite gradients (naming the parameter), length
    /// mismatches against earlier steps, and calls before
    /// [`Adam::begin_step`].
    pub fn update(&mut self, name: &str, param: &mut [T], grad: &[T]) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Invalid("Adam: update called before begin_step".into()));
        }
        if param.len() != grad.len() {
            return Err(Error::shape(
                format!("Adam update of {name}"),
                format!("{} gradient entries", param.len()),
                format!("{}", grad.len()),
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); param.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); param.len()]);
        if m.len() != param.len() {
            return Err(Error::Invalid(format!(
                "Adam: parameter {name} changed size between steps"
            )));
        }
        // Bias corrections computed in f64: beta^t underflows gracefully.
        let c1 = T::from_f64(1.0 - self.beta1.to_f64().powi(self.t as i32));
        let c2 = T::from_f64(1.0 - self.beta2.to_f64().powi(self.t as i32));
        let one = T::one();
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (one - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (one - self.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            param[i] = param[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}
