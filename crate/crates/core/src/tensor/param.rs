use std::collections::HashSet;
use std::ops::Index;

use sha2::{Digest, Sha256};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A named trainable tensor. Values are always exactly representable as
/// `f32` so checkpoints round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of a model's parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::arg(format!("duplicate parameter name {name:?}")));
        }
        tensor.round_to_f32();
        self.params.push(Parameter { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    /// Overwrites a parameter value (rounded to `f32`). Shape must match.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: {:?} vs {:?}",
                p.name,
                p.tensor.shape(),
                value.shape()
            )));
        }
        value.round_to_f32();
        p.tensor = value;
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone()))
                .collect(),
        )
    }

    /// Replaces all values with those of `other`, which must have the same
    /// names and shapes in the same order.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(&other.params) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
        }
        self.params.clone_from(&other.params);
        Ok(())
    }

    /// SHA-256 over the checkpoint encoding, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)
            .expect("writing to a Vec cannot fail");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub(crate) fn check_unique_names(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::arg(format!("duplicate parameter name {:?}", p.name)));
            }
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, name: String, tensor: Tensor) {
        self.params.push(Parameter { name, tensor });
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gathers per-parameter gradients, zero for parameters the loss does not
    /// touch.
    pub fn collect(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        ParamGrads(
            self.0
                .iter()
                .zip(store.iter())
                .map(|(&v, p)| grads.get_or_zeros(v, p.tensor.shape()))
                .collect(),
        )
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// One gradient tensor per parameter, in store order.
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Tensor>);
