//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors with gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    grads: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(Arc::new(value));
        self.names.push(name);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Registers every parameter as a gradient-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(Arc::clone(v), true))
                .collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| tape.leaf(Arc::clone(v), false))
                .collect(),
        }
    }

    /// All parameters concatenated in registration order.
    pub fn flatten(&self) -> Tensor {
        let data = self
            .values
            .iter()
            .flat_map(|v| v.data().iter().copied())
            .collect();
        Tensor::from_vec(data)
    }

    /// Binds parameters as slices of one flat variable laid out like [`Self::flatten`].
    pub fn bind_flat<'t>(&self, flat: Var<'t>) -> Result<Bound<'t>> {
        let total = self.total_elements();
        if flat.shape() != [total] {
            return Err(Error::Shape(format!(
                "flat parameter vector has shape {:?}, expected [{total}]",
                flat.shape()
            )));
        }
        let column = flat.reshape(&[total, 1])?;
        let mut offset = 0;
        let mut vars = Vec::with_capacity(self.values.len());
        for v in &self.values {
            let n = v.numel();
            vars.push(column.slice_rows(offset, n)?.reshape(v.shape())?);
            offset += n;
        }
        Ok(Bound { vars })
    }

    /// Overwrites all parameter values from a flat vector.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_elements() {
            return Err(Error::Shape("flat parameter length".into()));
        }
        let mut offset = 0;
        for v in &mut self.values {
            let t = Arc::make_mut(v);
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Adds the gradients of a bound pass into the stored gradient buffers.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_>, grads: &Gradients) {
        for (slot, var) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(*var) {
                slot.add_assign(g);
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Mutable parameter values paired with their gradients.
    pub fn values_and_grads(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.values
            .iter_mut()
            .map(Arc::make_mut)
            .zip(self.grads.iter())
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.values.iter().map(|v| v.shape().to_vec()).collect()
    }

    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// Tape variables for every parameter of a [`ParamStore`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}
