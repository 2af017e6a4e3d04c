use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Head,
    Weighting,
}

/// A named trainable tensor with a fixed learning-rate group.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    name: String,
    group: ParamGroup,
    tensor: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }
}

/// Ordered registry of every parameter a model owns.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
    names: BTreeSet<String>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), names: BTreeSet::new() }
    }

    /// Registers a new parameter and returns its tensor handle.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, data: Vec<S>, shape: &[usize]) -> Result<Tensor<S>> {
        let name = name.into();
        if !self.names.insert(name.clone()) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let tensor = Tensor::leaf(data, shape)?;
        self.params.push(Parameter { name, group, tensor: tensor.clone() });
        Ok(tensor)
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<Tensor<S>> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| S::lit(rng.gen_range(-bound..=bound))).collect();
        self.add(name, group, data, shape)
    }

    pub fn add_const(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], v: f64) -> Result<Tensor<S>> {
        let n = shape.iter().product();
        self.add(name, group, vec![S::lit(v); n], shape)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.tensor.numel()).sum()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Parameter<S>> + 'a {
        self.params.iter().filter(move |p| p.name.starts_with(prefix))
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }

    /// Appends all parameters of `other`, rejecting name clashes.
    pub fn extend(&mut self, other: ParamStore<S>) -> Result<()> {
        for p in other.params {
            if !self.names.insert(p.name.clone()) {
                return Err(Error::Config(format!("duplicate parameter name `{}`", p.name)));
            }
            self.params.push(p);
        }
        Ok(())
    }
}
