//! Named parameter storage and the Adam update.

use std::collections::HashMap;

use thiserror::Error;

use crate::diffengine::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient on parameter {0}")]
    NonFiniteGradient(String),
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    /// Adam first/second moment buffers.
    moment1: Tensor<T>,
    moment2: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Ordered collection of named parameters; names are unique and the order
/// is the creation order, which fixes checkpoint layout and gradient
/// reduction order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            trainable,
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.grad.shape());
        }
    }

    /// Accumulates (+=) collected tape gradients into the buffers.
    pub fn accumulate_grads(&mut self, grads: &[(ParamId, Tensor<T>)]) {
        for (id, g) in grads {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Snapshot of all values, for best-epoch bookkeeping.
    pub fn values_snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Tensor<T>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }

    /// One Adam step with bias correction over all trainable parameters;
    /// `step_count` is 1-based. Aborts on non-finite gradients, naming the
    /// parameter.
    pub fn adam_step(
        &mut self,
        lr: f64,
        adam: AdamParams,
        step_count: u64,
    ) -> Result<(), OptimError> {
        let b1 = T::from_f64(adam.beta1);
        let b2 = T::from_f64(adam.beta2);
        let eps = T::from_f64(adam.eps);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - adam.beta1.powi(step_count as i32));
        let bc2 = T::from_f64(1.0 - adam.beta2.powi(step_count as i32));
        let lr = T::from_f64(lr);
        for p in &mut self.params {
            if !p.trainable {
                continue;
            }
            if !p.grad.is_finite() {
                return Err(OptimError::NonFiniteGradient(p.name.clone()));
            }
            let n = p.value.numel();
            for i in 0..n {
                let g = p.grad.data()[i];
                let m = b1 * p.moment1.data()[i] + (one - b1) * g;
                let v = b2 * p.moment2.data()[i] + (one - b2) * g * g;
                p.moment1.data_mut()[i] = m;
                p.moment2.data_mut()[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                p.value.data_mut()[i] = p.value.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
