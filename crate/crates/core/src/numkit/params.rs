use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Ordered, named collection of parameter tensors.
///
/// Model structs keep indices into a `ParamSet`; the set is what gets
/// averaged, serialized, counted, hashed and stepped by Adam.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Places every tensor on `g`. Trainable binding of a frozen set is a
    /// contract error.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        if trainable && self.frozen {
            return Err(Error::contract("gradient binding of a frozen parameter set"));
        }
        Ok(self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect())
    }

    /// Collects gradients for bound vars, zero-filled where none flowed.
    pub fn grads(&self, g: &Graph, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|v| g.grad_or_zeros(*v)).collect()
    }

    /// Replaces all tensors, checking shapes.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::dim(format!(
                "assign {} tensors to a set of {}",
                tensors.len(),
                self.tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if !old.same_shape(new) {
                return Err(Error::dim(format!(
                    "tensor {} ({}): {:?} vs {:?}",
                    i,
                    self.names[i],
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    /// SHA-256 over names, shapes and values; stable across runs.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            h.update(t.to_le_bytes());
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a tensor's shape and values.
pub fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    h.update(t.to_le_bytes());
    hex_digest(h)
}
