use rand::Rng;

use super::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            tensor,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform Glorot init for a `[fan_in, fan_out]` matrix.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, &[fan_in, fan_out], a, rng)
    }

    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the parameter-leaf gradients recorded on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            self.params[id.0].tensor.accumulate_grad(g);
        }
    }

    /// Replaces values from `(name, tensor)` pairs; every stored parameter
    /// must be present with a matching shape.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in values {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = &mut self.params[id.0];
            if p.tensor.shape() != t.shape() {
                return Err(Error::dim("load_values", p.tensor.shape(), t.shape()));
            }
            p.tensor = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!("missing parameter `{}`", self.params[i].name)));
        }
        Ok(())
    }
}
