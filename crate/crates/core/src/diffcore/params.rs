use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
        });
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    /// Replaces the value of a trainable parameter with one of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?;
        let e = &mut self.entries[i];
        if !e.trainable {
            return Err(Error::contract(format!("parameter {name:?} is frozen")));
        }
        if e.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param_set",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// Replaces a value regardless of the trainable flag. Used when loading
    /// checkpoints; the shape must still match.
    pub fn overwrite(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?;
        let e = &mut self.entries[i];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param_overwrite",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = self
            .index_of(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?;
        self.entries[i].trainable = trainable;
        Ok(())
    }

    /// Binds the parameter on `tape`.
    pub fn var<'t>(&self, tape: &'t Tape, name: &str) -> Result<Var<'t>> {
        let e = self
            .entry(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?;
        tape.param(&e.name, &e.value, e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Gradients keyed by parameter name, in parameter-set order.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    entries: Vec<(String, Tensor)>,
}

impl GradMap {
    pub fn insert(&mut self, name: String, grad: Tensor) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = grad;
        } else {
            self.entries.push((name, grad));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest absolute gradient value across all entries.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, (_, g)| m.max(g.max_abs()))
    }
}
