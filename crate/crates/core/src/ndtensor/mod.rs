//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`DiffTensor`] is a plain value: a shape plus row-major data. Nothing about
//! it is shared or reference-counted, so tensors can be cloned, stored, and
//! moved across threads freely. Differentiation goes through an explicit
//! [`DiffGraph`] tape: bind the tensors that need gradients as leaves with
//! [`DiffGraph::leaf`], run ops against the graph, then call
//! [`DiffGraph::backward`] on a scalar loss. Ops whose inputs are all detached
//! skip recording entirely, so inference pays no tape overhead.
//!
//! Two hard invariants hold for every tensor in the system:
//! - `product(shape) == data.len()`
//! - every element is finite; ops reject NaN/Inf at their boundaries

mod graph;
pub(crate) mod ops;

pub mod gradcheck;

pub use graph::{DiffGraph, Gradients, NodeId};
pub use ops::{
    activation, add, depthwise_conv2d, gather, layer_norm, linear, mul, pointwise_conv2d,
    reshape, scale, softmax_cross_entropy, spatial_contract, stack_rows, sum, Activation,
};

use crate::error::{Error, Result};

/// Dense row-major f64 tensor, optionally bound to a node of a [`DiffGraph`].
#[derive(Debug, Clone)]
pub struct DiffTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl DiffTensor {
    /// Builds a tensor, validating the shape/length agreement and finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "tensor shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "tensor value at flat index {i} is not finite"
            )));
        }
        Ok(DiffTensor { shape: shape.to_vec(), data, requires_grad: false, node: None })
    }

    /// Like [`DiffTensor::new`] with `requires_grad` already set.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Self::new(shape, data)?.requiring_grad())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        DiffTensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, node: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(&[1], vec![value])
    }

    /// Internal constructor for values an op has already validated.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        DiffTensor { shape, data, requires_grad: false, node: None }
    }

    pub(crate) fn raw_bound(shape: Vec<usize>, data: Vec<f64>, node: NodeId) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        DiffTensor { shape, data, requires_grad: true, node: Some(node) }
    }

    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizers. Callers are responsible for keeping
    /// values finite; the next op boundary re-checks and errors otherwise.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn set_node(&mut self, node: NodeId) {
        self.node = Some(node);
    }

    /// Value of a single-element tensor.
    ///
    /// Panics on multi-element tensors; that is a programming error, not an
    /// input condition.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    /// Copy with no graph binding and `requires_grad` off.
    pub fn detached(&self) -> Self {
        DiffTensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            node: None,
        }
    }
}
