//! Named parameter storage shared by layers, optimiser, checkpoints and the
//! perturbation probe.

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F: Float> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Non-trainable state, e.g. batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<F: Float> {
    pub name: String,
    pub value: Tensor<F>,
}

/// Running-statistics update produced by a train-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnUpdate<F: Float> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub batch_mean: Vec<F>,
    /// Unbiased batch variance.
    pub batch_var: Vec<F>,
    pub momentum: F,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Float> {
    params: Vec<Parameter<F>>,
    buffers: Vec<Buffer<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.param_id(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_id(&name).is_some() {
            return Err(Error::config(format!("duplicate buffer name {name}")));
        }
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|b| b.name == name).map(BufferId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<F> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<F> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<F>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<F>] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::ZERO);
        }
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn apply_bn_update(&mut self, update: &BnUpdate<F>) {
        let m = update.momentum;
        let keep = |run: &mut Tensor<F>, batch: &[F]| {
            for (r, &b) in run.data_mut().iter_mut().zip(batch) {
                *r = m * *r + (F::ONE - m) * b;
            }
        };
        keep(self.buffer_mut(update.running_mean), &update.batch_mean);
        keep(self.buffer_mut(update.running_var), &update.batch_var);
    }

    /// Copies every parameter and buffer whose name exists in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore<F>) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.param_id(&p.name) {
                let src = other.value(id);
                if src.shape() != p.value.shape() {
                    return Err(Error::dim(format!("shape mismatch copying {}", p.name)));
                }
                p.value = src.clone();
                copied += 1;
            }
        }
        for b in &mut self.buffers {
            if let Some(id) = other.buffer_id(&b.name) {
                let src = other.buffer(id);
                if src.shape() != b.value.shape() {
                    return Err(Error::dim(format!("shape mismatch copying {}", b.name)));
                }
                b.value = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Flattened copy of all parameter values in registration order.
    pub fn flat_values(&self) -> Vec<F> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.value.shape().to_vec()).collect()
    }
}
