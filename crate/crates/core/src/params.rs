//! Named, ordered parameter collections with per-entry aggregation tags.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormState, Tensor};

/// Whether an entry is averaged by the server or may stay client-local.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamTag {
    Aggregatable,
    NormLocal,
}

impl ParamTag {
    pub fn to_byte(self) -> u8 {
        match self {
            ParamTag::Aggregatable => 0,
            ParamTag::NormLocal => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(ParamTag::Aggregatable),
            1 => Some(ParamTag::NormLocal),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tag: ParamTag,
    pub tensor: Tensor<T>,
}

impl<T> ParamEntry<T> {
    /// Running statistics are state, not optimized parameters.
    pub fn is_trainable(&self) -> bool {
        !is_running_stat(&self.name)
    }
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Insertion-ordered map from unique names to tagged tensors.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: PartialEq> PartialEq for ParameterSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: ParamTag, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, tag, tensor });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entry(name).map(|e| &e.tensor).ok_or_else(|| missing(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].tensor),
            None => Err(missing(name)),
        }
    }

    pub fn tag(&self, name: &str) -> Option<ParamTag> {
        self.entry(name).map(|e| e.tag)
    }

    /// Entries carrying `tag`, in order.
    pub fn subset(&self, tag: ParamTag) -> Self {
        self.filtered(|e| e.tag == tag)
    }

    pub fn filtered(&self, keep: impl Fn(&ParamEntry<T>) -> bool) -> Self {
        let mut out = Self::new();
        for e in self.entries.iter().filter(|e| keep(e)) {
            out.insert(e.name.clone(), e.tag, e.tensor.clone()).expect("names are unique");
        }
        out
    }

    /// Zero tensors for every trainable entry, in the same order; the shape of a gradient set.
    pub fn zeros_like_trainable(&self) -> Self {
        let mut out = Self::new();
        for e in self.entries.iter().filter(|e| e.is_trainable()) {
            out.insert(e.name.clone(), e.tag, Tensor::zeros(e.tensor.shape())).expect("names are unique");
        }
        out
    }

    /// Overwrites matching entries with those of `other`. Every name in `other` must exist here
    /// with the same shape.
    pub fn overwrite_from(&mut self, other: &ParameterSet<T>) -> Result<()> {
        for e in other.iter() {
            let dst = self.get_mut(&e.name)?;
            if dst.shape() != e.tensor.shape() {
                return Err(Error::shape(format!(
                    "{}: {:?} vs {:?}",
                    e.name,
                    dst.shape(),
                    e.tensor.shape()
                )));
            }
            dst.data_mut().copy_from_slice(e.tensor.data());
        }
        Ok(())
    }

    /// Same names, tags and shapes in the same order.
    pub fn is_compatible(&self, other: &ParameterSet<T>) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tag == b.tag && a.tensor.shape() == b.tensor.shape())
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let mut out = ParameterSet::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.tag, e.tensor.cast()).expect("names are unique");
        }
        out
    }

    /// Reads the batch-norm layer stored under `prefix` (`<prefix>.scale`, `.shift`,
    /// `.running_mean`, `.running_var`).
    pub fn batch_norm_state(&self, prefix: &str, momentum: T, epsilon: T) -> Result<BatchNormState<T>> {
        let field = |s: &str| self.get(&format!("{prefix}.{s}")).map(|t| t.data().to_vec());
        Ok(BatchNormState {
            scale: field("scale")?,
            shift: field("shift")?,
            running_mean: field("running_mean")?,
            running_var: field("running_var")?,
            momentum,
            epsilon,
        })
    }

    pub fn store_running_stats(&mut self, prefix: &str, state: &BatchNormState<T>) -> Result<()> {
        self.get_mut(&format!("{prefix}.running_mean"))?.data_mut().copy_from_slice(&state.running_mean);
        self.get_mut(&format!("{prefix}.running_var"))?.data_mut().copy_from_slice(&state.running_var);
        Ok(())
    }
}

fn missing(name: &str) -> Error {
    Error::Validation(format!("no parameter named {name:?}"))
}
