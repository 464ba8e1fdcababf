use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.values_mut().collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every tensor on `tape`. With `trainable == false` the leaves
    /// are constants and no gradients are tracked.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.watch(t)
                } else {
                    tape.constant(t.clone().with_requires_grad(false))
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of every bound tensor into its gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            if let Some(&v) = bound.vars.get(name) {
                grads.accumulate_into(v, t)?;
            }
        }
        Ok(())
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }
}

/// Uniform in `±1/sqrt(fan_in)`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}
