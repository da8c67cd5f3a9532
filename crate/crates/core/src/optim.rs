//! SGD with Nesterov momentum and the step learning-rate schedule.

use crate::error::{Error, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Piecewise-constant schedule: `base` until `ceil(0.5 * epochs)`, then
/// `base / 10` until `ceil(0.75 * epochs)`, then `base / 100`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub epochs: usize,
}

impl LrSchedule {
    pub fn new(base: f64, epochs: usize) -> Result<Self> {
        if epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(base >= 0.0 && base.is_finite()) {
            return Err(Error::config(format!("invalid base learning rate {base}")));
        }
        Ok(LrSchedule { base, epochs })
    }

    /// Epochs at which the rate drops, `(ceil(0.5 tau), ceil(0.75 tau))`.
    pub fn breakpoints(&self) -> (usize, usize) {
        ((self.epochs + 1) / 2, (3 * self.epochs).div_ceil(4))
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::config(format!("epoch {epoch} outside schedule of {} epochs", self.epochs)));
        }
        let (first, second) = self.breakpoints();
        Ok(if epoch < first {
            self.base
        } else if epoch < second {
            self.base * 0.1
        } else {
            self.base * 0.01
        })
    }
}

/// Velocity buffers, one per trainable tensor, zero-initialised.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F: Float> {
    pub velocity: Vec<Tensor<F>>,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        OptimizerState { velocity: store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One Nesterov step over every parameter in `store`:
///
/// ```text
/// d = g + wd * w
/// v = mu * v + d
/// w = w - lr * (d + mu * v)
/// ```
///
/// A non-finite gradient aborts the step before any parameter changes.
pub fn sgd_nesterov_step<F: Float>(store: &mut ParamStore<F>, state: &mut OptimizerState<F>, lr: f64, cfg: SgdConfig) -> Result<()> {
    if state.velocity.len() != store.params().len() {
        return Err(Error::dim("optimizer state does not match parameter set"));
    }
    for (p, v) in store.params().iter().zip(&state.velocity) {
        if p.grad.shape() != v.shape() {
            return Err(Error::dim(format!("velocity shape mismatch for {}", p.name)));
        }
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            let norm: f64 = p.value.data().iter().map(|w| w.as_f64() * w.as_f64()).sum::<f64>().sqrt();
            return Err(Error::Numeric(format!(
                "non-finite gradient in {} at index {i} (grad {}, |w| = {norm:.6e}, shape {:?})",
                p.name,
                p.grad.data()[i],
                p.value.shape()
            )));
        }
    }
    let (lr, mu, wd) = (F::cast(lr), F::cast(cfg.momentum), F::cast(cfg.weight_decay));
    for (p, v) in store.params_mut().iter_mut().zip(&mut state.velocity) {
        let grads = p.grad.data();
        let w = p.value.data_mut();
        for ((wi, &gi), vi) in w.iter_mut().zip(grads).zip(v.data_mut()) {
            let d = gi + wd * *wi;
            *vi = mu * *vi + d;
            *wi -= lr * (d + mu * *vi);
        }
    }
    Ok(())
}
