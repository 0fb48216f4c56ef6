//! Named parameter storage and initialization.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// The transformer encoder stacks (reduced learning rate).
    Transformer,
    Base,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
    Normal { std: f64 },
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

/// Builds a [`ParamStore`] drawing initial values from one seeded stream.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    group: ParamGroup,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
            group: ParamGroup::Base,
        }
    }

    /// Runs `f` with `name` appended to the dotted prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    /// Runs `f` registering into `group`.
    pub fn in_group<T>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Self) -> T) -> T {
        let saved = std::mem::replace(&mut self.group, group);
        let out = f(self);
        self.group = saved;
        out
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Constant(v) => Tensor::full(shape, v),
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
            }
            Init::Normal { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| normal.sample(rng))
            }
        };
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.store.insert(full, value, self.group)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

impl ParamStore {
    fn insert(&mut self, name: String, value: Tensor, group: ParamGroup) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, group });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| &self.params[id.0].value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id_of(name).map(|id| &mut self.params[id.0].value)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces every value with the same-named tensor from `other`.
    pub fn load_values(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for p in &mut self.params {
            let v = lookup(&p.name)
                .ok_or_else(|| Error::Artifact(format!("missing tensor {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Artifact(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Records every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.variable(p.value.clone()))
                .collect(),
        }
    }
}

/// Tape handles of a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut b = ParamBuilder::new(5);
            b.scope("a", |b| b.add("w", &[3, 4], Init::FanInUniform { fan_in: 4 }));
            b.finish()
        };
        let (x, y) = (build(), build());
        assert_eq!(x.by_name("a.w"), y.by_name("a.w"));
    }

    #[test]
    fn fan_in_std_matches_uniform_bound() {
        // 3x3x3 kernel over 64 input channels, 64 outputs.
        let fan_in = 64 * 27;
        let mut b = ParamBuilder::new(11);
        let id = b.add("w", &[64, 64, 3, 3, 3], Init::FanInUniform { fan_in });
        let store = b.finish();
        let v = &store.get(id).value;
        let n = v.numel() as f64;
        let mean = v.sum() / n;
        let var = v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected = 1.0 / (fan_in as f64).sqrt() / 3f64.sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.10);
        assert!(v.data().iter().all(|x| x.abs() <= 1.0 / (fan_in as f64).sqrt()));
    }
}
