use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Scalar, Tape, Tensor};

/// Path segment that marks expert-owned parameters, e.g.
/// `layers.1.moe.experts.3.fc1.weight`.
pub const EXPERT_SEGMENT: &str = "experts";

pub fn is_expert_param(name: &str) -> bool {
    name.split('.').any(|s| s == EXPERT_SEGMENT)
}

/// A named trainable tensor and its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(T::ZERO));
    }

    /// Adds the gradients a backward pass left on `tape` into the store.
    pub fn accumulate_from(&mut self, tape: &Tape<T>) -> Result<()> {
        for (id, grad) in tape.param_grads() {
            if let Some(g) = grad {
                self.params[id.0].grad.add_assign(g)?;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}
