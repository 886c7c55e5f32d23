use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named tensor owned by a [`ParamStore`].
///
/// Gradient accumulation into a parameter with `trainable == false` is a no-op.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub grad: Option<Tensor<T>>,
}

/// Flat registry of every parameter in a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
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

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor,
            trainable: true,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn set_tensor(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::shape(
                "set_tensor",
                format!("{}: {:?} vs {:?}", p.name, p.tensor.shape(), tensor.shape()),
            ));
        }
        p.tensor = tensor;
        Ok(())
    }

    /// Set the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            if !trainable {
                p.grad = None;
            }
            n += 1;
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
            if !trainable {
                p.grad = None;
            }
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add `grads` into the stored gradient buffers, skipping frozen parameters.
    pub fn accumulate(&mut self, grads: &super::graph::Gradients<T>) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            p.grad = Some(match p.grad.take() {
                None => g.clone(),
                Some(prev) => prev.zip_map(g, |a, b| a + b).expect("grad shape"),
            });
        }
    }

    /// SHA-256 over (name, shape, payload) of one parameter.
    pub fn param_hash(&self, id: ParamId) -> String {
        let p = &self.params[id.0];
        let mut h = Sha256::new();
        h.update(p.name.as_bytes());
        for d in p.tensor.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(p.tensor.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    grad: p.grad.as_ref().map(|g| g.cast()),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
