use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; updated during training forward passes only.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Named parameters of one network. Parameters are registered in
/// construction order, which fixes the serialization order.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { uid: fresh_uid(), params: self.params.clone() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { uid: fresh_uid(), params: Vec::new() }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, kind, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
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

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Applies running-statistic updates recorded by a training-mode graph.
    pub fn apply_buffer_updates(&mut self, graph: &mut Graph) {
        let uid = self.uid;
        let mut rest = Vec::new();
        for (owner, id, value) in graph.buffer_updates.drain(..) {
            if owner == uid {
                self.params[id.0].value = value;
            } else {
                rest.push((owner, id, value));
            }
        }
        graph.buffer_updates = rest;
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.params.len(), other.params.len());
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            a.value = b.value.clone();
        }
    }

    pub(crate) fn from_params(params: Vec<Param>) -> Self {
        Self { uid: fresh_uid(), params }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

type BackwardFn = Box<dyn FnOnce(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<(u64, ParamId)>,
}

/// Tape of operations recorded during one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    frozen: HashSet<u64>,
    pub(crate) buffer_updates: Vec<(u64, ParamId, Tensor)>,
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), training, frozen: HashSet::new(), buffer_updates: Vec::new() }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Parameters of `store` enter this graph as constants.
    pub fn freeze(&mut self, store: &ParamStore) {
        self.frozen.insert(store.uid());
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad: false, param: None })
    }

    /// Leaf that receives a gradient without being a parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Node { value, parents: Vec::new(), backward: None, requires_grad: true, param: None })
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let requires_grad =
            self.training && p.kind == ParamKind::Trainable && !self.frozen.contains(&store.uid());
        self.push(Node {
            value: p.value.clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: Some((store.uid(), id)),
        })
    }

    pub(crate) fn record_buffer_update(&mut self, store: &ParamStore, id: ParamId, value: Tensor) {
        self.buffer_updates.push((store.uid(), id, value));
    }

    /// Records an operation. The closure returns one optional gradient per
    /// parent; it is dropped unused when no parent needs a gradient.
    pub fn op<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: FnOnce(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
            param: None,
        })
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        let mut out = Grads::default();

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Some((uid, pid)) = self.nodes[idx].param {
                out.accumulate(uid, pid, grad);
                continue;
            }
            let Some(backward) = self.nodes[idx].backward.take() else {
                out.leaves.insert(idx, grad);
                continue;
            };
            let parents = self.nodes[idx].parents.clone();
            let parent_grads = {
                let ctx = BackwardCtx {
                    grad: &grad,
                    output: &self.nodes[idx].value,
                    inputs: parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    needs: parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
                };
                backward(&ctx)
            };
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (&p, g) in parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape(), "gradient shape mismatch");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        out
    }
}

/// Parameter (and leaf) gradients produced by [`Graph::backward`].
#[derive(Default)]
pub struct Grads {
    params: HashMap<(u64, ParamId), Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Grads {
    fn accumulate(&mut self, uid: u64, id: ParamId, g: Tensor) {
        match self.params.get_mut(&(uid, id)) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.params.insert((uid, id), g);
            }
        }
    }

    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.params.get(&(store.uid(), id))
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }
}
