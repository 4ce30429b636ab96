use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    /// `big + small`, `small` repeated over the leading extents of `big`.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    ClampMax(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    RowScale(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Ordered record of executed operations.
///
/// A node requires a gradient when any of its inputs does; [`Tape::backward`]
/// only visits those nodes.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut value = tensor;
        value.grad = None;
        self.push_raw(value, Op::Leaf)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Brings a stored parameter onto the tape. Repeated calls for the same
    /// id return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id).tensor.clone().with_requires_grad(store.get(id).trainable);
        let mut value = t;
        value.grad = None;
        let v = self.push_raw(value, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Iterates `(param id, accumulated grad)` for every parameter leaf.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_raw(value.with_requires_grad(needs), op)
    }

    fn push_raw(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients accumulate into leaves; calling twice without
    /// [`Tape::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            match self.nodes[id].op {
                Op::Leaf | Op::Param => self.nodes[id].value.accumulate_grad(&g),
                _ => self.propagate(id, &g, &mut adj),
            }
        }
        Ok(())
    }

    pub(crate) fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}
