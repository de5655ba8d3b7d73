use std::collections::HashMap;

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::nn::scalar::Scalar;

/// A named learnable (or buffer) array with its gradient slot.
///
/// Everything is carried as a 4-D array; vectors such as biases or batch-norm
/// scales are stored with singleton axes, e.g. `(1, C, 1, 1)`, and scalars as
/// `(1, 1, 1, 1)`.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Array4<F>,
    pub grad: Array4<F>,
    pub trainable: bool,
}

/// Ordered parameter store. Insertion order is the canonical order used by
/// the optimizer, the checkpoint format, and every iteration in the crate, so
/// runs stay deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Array4<F>, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParameter(name.to_string()));
        }
        let grad = Array4::zeros(value.raw_dim());
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        Ok(())
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<F>> {
        Ok(&self.params[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<F>> {
        let i = self.position(name)?;
        Ok(&mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Array4<F>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Array4<F>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.raw_dim() != value.raw_dim() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                axis: "all",
                expected: p.value.len(),
                actual: value.len(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn by_index(&self, i: usize) -> &Parameter<F> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Parameter<F> {
        &mut self.params[i]
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Set every gradient to exactly zero.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_scalar_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copy into another precision, preserving order and flags.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let value = p.value.mapv(|x| G::from_f64(x.as_f64()));
            out.insert(&p.name, value, p.trainable)
                .expect("names are unique by construction");
        }
        out
    }
}
