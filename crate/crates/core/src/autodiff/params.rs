use crate::error::{AfnError, Result};
use crate::tensor::{Real, Tensor};

use super::graph::{Graph, Gradients, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a tracked leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a, F>) -> BoundParams {
        BoundParams(self.values.iter().map(|v| g.param(v)).collect())
    }

    /// Replaces the value of a parameter, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(AfnError::dim("param set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Tensor<F>> {
        self.values.iter().map(|v| Tensor::zeros(v.shape())).collect()
    }
}

/// Graph handles of a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    /// Handles in declaration order, for graphs that feed parameters as
    /// ordinary inputs.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradient per parameter in declaration order; unused parameters get zeros.
    pub fn collect<F: Real>(&self, grads: &mut Gradients<F>, params: &ParamSet<F>) -> Vec<Tensor<F>> {
        self.0
            .iter()
            .zip(params.values())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}
