//! Minimal reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tensor`] is an immutable, reference-counted value. Every op whose
//! inputs require gradients records an [`OpNode`] pointing at those inputs, so
//! the value graph doubles as the tape. [`Tensor::backward`] walks it once in
//! reverse topological order.

mod check;
mod ops;
mod scalar;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex};

pub use check::{grad_check, GradCheckReport};
pub(crate) use ops::Op;
pub(crate) use scalar::gemm;
pub use scalar::Real;

use crate::error::{Error, Result};

pub struct Tensor<T: Real = f32>(Arc<Inner<T>>);

struct Inner<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<OpNode<T>>,
}

/// One recorded operation: what produced a tensor and from which inputs.
pub struct OpNode<T: Real> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Tensor<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        if let Some(node) = &self.0.node {
            d.field("op", &node.op.name());
        }
        d.finish()
    }
}

// Long recurrent graphs would otherwise drop recursively, one stack frame per
// recorded op.
impl<T: Real> Drop for Inner<T> {
    fn drop(&mut self) {
        let Some(node) = self.node.take() else { return };
        let mut pending = node.inputs;
        while let Some(t) = pending.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.0) {
                if let Some(node) = inner.node.take() {
                    pending.extend(node.inputs);
                }
            }
        }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<OpNode<T>>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::Dimension {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// A leaf that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(t.with_requires_grad(true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(shape.to_vec(), vec![value; numel_of(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false, None)
    }

    pub fn from_slice(shape: &[usize], data: &[T]) -> Result<Self> {
        Self::new(shape, data.to_vec())
    }

    /// Fresh leaf with the same values and the given gradient flag.
    pub fn with_requires_grad(&self, requires_grad: bool) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), requires_grad, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        self.with_requires_grad(false)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[&Tensor<T>]) -> Self {
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then(|| OpNode {
            op,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
        });
        Self::build(shape, data, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Name of the op that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op.name())
    }

    pub fn same_tensor(&self, other: &Tensor<T>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Inner<T> {
        Arc::as_ptr(&self.0)
    }

    /// Recorded nodes reachable from `self`, inputs before consumers.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Inner<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !seen.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// True if any recorded ancestor uses a custom (surrogate) backward.
    pub fn has_custom_node(&self) -> bool {
        self.topo_order()
            .iter()
            .any(|t| t.0.node.as_ref().is_some_and(|n| n.op.is_custom()))
    }

    /// Reverse-mode sweep from a scalar. Gradients add onto whatever is
    /// already stored until [`Tensor::zero_grad`] is called.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Inner<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.key()) else { continue };
            if let Some(node) = &t.0.node {
                let input_grads = node.op.backward(&node.inputs, t, &g);
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    match pending.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            pending.insert(input.key(), ig);
                        }
                    }
                }
            }
            let mut slot = t.0.grad.lock().expect("grad lock poisoned");
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
