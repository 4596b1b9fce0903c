//! Ordered, named parameter collections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a parameter and return its index.
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// The first `n` entries as a new set.
    pub fn prefix(&self, n: usize) -> ParamSet {
        ParamSet {
            names: self.names[..n].to_vec(),
            values: self.values[..n].to_vec(),
        }
    }

    /// Same names and shapes, in the same order.
    pub fn ensure_matches(&self, other: &ParamSet, what: &str) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Shape(format!("{what}: parameter names differ")));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "{what}: {} has shape {:?} vs {:?}",
                    self.names[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
        }
    }
}
