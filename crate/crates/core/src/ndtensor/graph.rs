//! The differentiation tape.
//!
//! A [`DiffGraph`] is an append-only list of nodes. Node ids are plain
//! indices, so insertion order *is* topological order: an op can only consume
//! tensors that already carry a node id. `backward` walks the list once in
//! reverse, handing each node's accumulated output gradient to its backward
//! rule and adding the returned contributions onto the parents. Fan-out
//! therefore accumulates additively with no bookkeeping beyond the ids.
//!
//! The graph is single-use: `backward` consumes it and returns the leaf
//! gradients, matching the build-eagerly / free-after-backward lifecycle.

use crate::error::{Error, Result};
use crate::ndtensor::DiffTensor;

pub type NodeId = usize;

/// Backward rule: given the node's output gradient, produce one gradient
/// buffer per input (in the op's input order, participating or not).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct Node {
    len: usize,
    /// One entry per op input; `None` marks inputs outside the graph
    /// (constants), whose gradient contribution is discarded.
    parents: Vec<Option<NodeId>>,
    /// `None` for leaves.
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
}

impl DiffGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Binds a gradient-bearing tensor into this graph and returns the bound
    /// copy. All uses of the returned copy share one node, so a weight used
    /// several times in a forward pass accumulates all of its path gradients.
    pub fn leaf(&mut self, t: &DiffTensor) -> Result<DiffTensor> {
        if !t.requires_grad() {
            return Err(Error::Contract(
                "leaf() on a tensor with requires_grad = false".into(),
            ));
        }
        let id = self.push(Node { len: t.len(), parents: Vec::new(), backward: None });
        let mut bound = t.clone();
        bound.set_node(id);
        Ok(bound)
    }

    pub(crate) fn record(
        &mut self,
        len: usize,
        parents: Vec<Option<NodeId>>,
        backward: BackwardFn,
    ) -> NodeId {
        debug_assert!(
            parents.iter().flatten().all(|&p| p < self.nodes.len()),
            "op input from a different graph"
        );
        self.push(Node { len, parents, backward: Some(backward) })
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Reverse-mode sweep from a scalar loss. Consumes the graph; the
    /// returned [`Gradients`] holds one buffer per reachable leaf.
    pub fn backward(self, loss: &DiffTensor) -> Result<Gradients> {
        let Some(root) = loss.node() else {
            return Err(Error::Contract("backward: loss is not part of this graph".into()));
        };
        if root >= self.nodes.len() {
            return Err(Error::Contract("backward: loss node id out of range".into()));
        }
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got {} elements",
                loss.len()
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = self.nodes.iter().map(|_| None).collect();
        grads[root] = Some(vec![1.0]);

        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            let Some(gout) = grads[id].take() else { continue };
            match &node.backward {
                None => {
                    // Leaf: keep the accumulated gradient for the caller.
                    grads[id] = Some(gout);
                }
                Some(rule) => {
                    let contribs = rule(&gout);
                    debug_assert_eq!(contribs.len(), node.parents.len());
                    for (parent, contrib) in node.parents.iter().zip(contribs) {
                        let Some(pid) = parent else { continue };
                        debug_assert_eq!(self.nodes[*pid].len, contrib.len());
                        match &mut grads[*pid] {
                            Some(acc) => {
                                for (a, c) in acc.iter_mut().zip(&contrib) {
                                    *a += c;
                                }
                            }
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
        }

        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`DiffGraph::backward`], indexed by node id.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a bound tensor. `None` when the tensor was
    /// never bound or did not influence the loss (a zero gradient).
    pub fn get(&self, t: &DiffTensor) -> Option<&[f64]> {
        self.by_node(t.node()?)
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id)?.as_deref()
    }
}
