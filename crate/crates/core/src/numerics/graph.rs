use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::{self, Axis, Op, Saved};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Option<Op>,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    saved: Saved,
}

/// Tape of operations for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so a node's inputs always have
/// smaller ids and the tape is acyclic by construction. A graph is meant to
/// live for a single training step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, keyed by node.
///
/// Only nodes that depend on a parameter and are reachable from the loss are
/// present; everything else is absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            value,
            requires_grad,
            saved: Saved::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    /// A leaf tracked by [`Graph::backward`].
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Batch mean and biased variance computed by a batch-norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].saved {
            Saved::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Evaluates `op` on `inputs` and records the result on the tape.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::invalid("inputs", alloc::format!("unknown node {}", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let (value, saved) = ops::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            saved,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Affine, &[x, w, b])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d { stride, padding }, &[x, w, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        self.apply(Op::MaxPool { size, stride }, &[x])
    }

    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::BatchNorm { eps, training: true }, &[x, gamma, beta])
    }

    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.apply(
            Op::BatchNorm { eps, training: false },
            &[x, gamma, beta, running_mean, running_var],
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    /// `a - b`, built from `add` and `scalar_div(-1)`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scalar_div(b, -1.0)?;
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scalar_div(&mut self, x: NodeId, divisor: f64) -> Result<NodeId> {
        self.apply(Op::ScalarDiv(divisor), &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Log, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(Axis::All), &[x])
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum(Axis::Rows), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::L2NormalizeRows { eps: super::NORM_EPS }, &[x])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn sq_euclidean_cdist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::SqEuclideanCdist, &[a, b])
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        self.apply(Op::Reshape(shape.into()), &[x])
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Op::SliceRows { start, end }, &[x])
    }

    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::LogSumExpRows, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("loss", "node does not belong to this graph"))?;
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut out = Gradients::default();
        if !root.requires_grad {
            return Ok(out);
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
                let input_grads = ops::backward(op, &inputs, &node.value, &node.saved, &grad, &needs);
                for (input, g) in node.inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    match &mut pending[input.0] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
            }
            out.grads.insert(NodeId(idx), Tensor::new(node.value.shape(), grad)?);
        }
        Ok(out)
    }
}
