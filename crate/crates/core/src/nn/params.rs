use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{config, Result};
use crate::rng::{normal, truncated_normal};
use crate::tensor::Tensor;

/// Role of a parameter. Only `Weight` entries are prunable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Position,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameters in construction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param { name, kind, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, id: usize) -> &Param {
        &self.entries[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Vec<Var<'t>> {
        self.entries
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }
}

/// Deterministic parameter initialiser: truncated normal weights (std
/// 0.02 by default), zero biases, unit/zero norm affine terms.
pub struct ParamInit<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub weight_std: f64,
}

impl<R: Rng> ParamInit<'_, R> {
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        let std = self.weight_std;
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| truncated_normal(rng, std));
        self.store.add(name, ParamKind::Weight, t)
    }

    pub fn bias(&mut self, name: &str, len: usize) -> Result<usize> {
        self.store.add(name, ParamKind::Bias, Tensor::zeros([len]))
    }

    pub fn norm(&mut self, prefix: &str, len: usize) -> Result<(usize, usize)> {
        let g = self.store.add(format!("{prefix}.gamma"), ParamKind::Norm, Tensor::full([len], 1.0))?;
        let b = self.store.add(format!("{prefix}.beta"), ParamKind::Norm, Tensor::zeros([len]))?;
        Ok((g, b))
    }

    pub fn position(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| normal(rng, 0.02));
        self.store.add(name, ParamKind::Position, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.add("a", ParamKind::Bias, Tensor::zeros([1])).unwrap();
        assert!(s.add("a", ParamKind::Bias, Tensor::zeros([1])).is_err());
        assert_eq!(s.parameter_count(), 1);
    }
}
