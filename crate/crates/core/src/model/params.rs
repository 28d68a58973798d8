use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.names.push(name.into());
        self.tensors.push(value);
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

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Replaces all tensors, keeping names; shapes must match.
    pub fn set_tensors(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::invalid("params", "tensor count mismatch"));
        }
        for (old, new) in self.tensors.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(Error::shape("params", old.shape(), new.shape()));
            }
        }
        self.tensors = values;
        Ok(())
    }

    /// True when every tensor is bit-identical.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}
