use std::collections::{BTreeMap, BTreeSet};

use super::ops::{self, Op};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Position of a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        NodeId(i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    /// Leaf fed from data; receives gradient only when probed.
    Input,
    /// Trainable leaf; always receives gradient.
    Param,
    /// Leaf that never receives gradient.
    Constant,
    /// Output of a recorded primitive.
    Interior,
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Option<Op>,
    inputs: Vec<NodeId>,
    role: NodeRole,
}

/// Ordered record of primitive applications, in topological order by
/// construction, plus the set of probed nodes whose gradients are retained.
#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    probes: BTreeSet<NodeId>,
}

/// Gradients keyed by node; every param and probe is present.
#[derive(Clone, Debug, Default)]
pub struct GradientSet<T = f32> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    /// Gradient of `id`, panicking if it was neither a param nor a probe.
    pub fn of(&self, id: NodeId) -> &Tensor<T> {
        self.grads
            .get(&id)
            .unwrap_or_else(|| panic!("node {id:?} is neither a param nor a probe"))
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            probes: BTreeSet::new(),
        }
    }

    fn push_leaf(&mut self, value: Tensor<T>, role: NodeRole) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NumericFault { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            role,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push_leaf(value, NodeRole::Input)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push_leaf(value, NodeRole::Param)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push_leaf(value, NodeRole::Constant)
    }

    /// Retain the gradient of `id` in every subsequent backward pass.
    pub fn probe(&mut self, id: NodeId) {
        self.probes.insert(id);
    }

    pub fn probes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.probes.iter().copied()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn role(&self, id: NodeId) -> NodeRole {
        self.nodes[id.0].role
    }

    pub fn op(&self, id: NodeId) -> Option<&Op> {
        self.nodes[id.0].op.as_ref()
    }

    pub fn inputs_of(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    pub fn params(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.role == NodeRole::Param)
            .map(|(i, _)| NodeId(i))
    }

    /// Evaluate `op` on recorded nodes and record the application.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Contract(format!("{}: unknown node {id:?}", op.name())));
            }
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = ops::forward(&op, &values)?;
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.to_vec(),
            role: NodeRole::Interior,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Op::Conv2d { stride, pad }, &inputs)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.apply(Op::Dense, &inputs)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        self.apply(Op::LeakyRelu { slope }, &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn maxpool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        self.apply(Op::MaxPool2d { kernel, stride }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::GlobalMaxPool, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn bilinear_resize(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        self.apply(Op::BilinearResize { height, width }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale { factor }, &[x])
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::StopGradient, &[x])
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        self.apply(Op::BceWithLogits, &[logits, target])
    }

    /// Gradients of the scalar `output` with respect to every param and probe.
    pub fn backward(&self, output: NodeId) -> Result<GradientSet<T>> {
        self.backward_seeded(output, T::one())
    }

    /// As [`Tape::backward`], scaling the seed gradient by `seed`.
    pub fn backward_seeded(&self, output: NodeId, seed: T) -> Result<GradientSet<T>> {
        let out = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Contract(format!("backward: unknown node {output:?}")))?;
        if !out.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let keep = |i: usize, n: &Node<T>| n.role == NodeRole::Param || self.probes.contains(&NodeId(i));
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        pending[output.0] = Some(Tensor::full(out.value.shape(), seed));
        let mut grads = BTreeMap::new();

        for i in (0..=output.0).rev() {
            let Some(grad) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let input_grads = ops::backward(op, &inputs, &node.value, &grad);
                for (id, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if self.nodes[id.0].role == NodeRole::Constant {
                        continue;
                    }
                    match &mut pending[id.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            if keep(i, node) {
                if !grad.all_finite() {
                    return Err(Error::NumericFault { op: "backward" });
                }
                grads.insert(NodeId(i), grad);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if keep(i, node) {
                grads
                    .entry(NodeId(i))
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradientSet { grads })
    }

    pub(crate) fn set_leaf_unchecked(&mut self, id: NodeId, value: Tensor<T>) {
        self.nodes[id.0].value = value;
    }

    /// Recompute every interior node from the leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        self.replay_with(false)
    }

    /// Replay holding every stop-gradient output at its recorded value, so
    /// the recomputed function is the one whose gradient backward returns.
    pub fn replay_detached(&self) -> Result<Vec<Tensor<T>>> {
        self.replay_with(true)
    }

    fn replay_with(&self, freeze_detached: bool) -> Result<Vec<Tensor<T>>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                None => node.value.clone(),
                Some(Op::StopGradient) if freeze_detached => node.value.clone(),
                Some(op) => {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &values[id.0]).collect();
                    ops::forward(op, &inputs)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }
}
