//! Dense tensors with reverse-mode gradients.
//!
//! A `Tensor` is a handle to a node in an acyclic compute graph. Forward
//! evaluation is eager; every op records its parents and a backward closure
//! when gradients are enabled. `backward` walks the graph in reverse
//! topological order, propagating vector-Jacobian products through flowing
//! buffers and accumulating (`+=`) into the persistent `grad` of leaf
//! tensors, so calling it twice without zeroing doubles leaf gradients.
//!
//! Tensors are single-threaded by construction (`Rc` + `RefCell`); parallel
//! training clones parameter data per worker and reduces plain gradient
//! vectors in a fixed order.

mod check;
mod nn;
mod ops;

pub use check::{grad_check, GradCheckError};
pub use nn::{
    batch_norm, dropout, ffn, multi_head_attention, AttentionConfig, AttentionWeights, BnMode,
    BnStats, FfnWeights, BN_EPS,
};
pub use ops::{conv2d, depthwise_xcorr};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Run `f` without recording the compute graph (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) type BackwardFn<S> = Box<dyn Fn(&mut BackCtx<'_, S>)>;

pub(crate) struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Handle to a graph node; cloning is cheap and shares the node.
pub struct Tensor<S: Scalar> {
    node: Rc<Node<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn from_node(node: Node<S>) -> Self {
        Self {
            node: Rc::new(node),
        }
    }

    /// Constant tensor (no gradient).
    pub fn constant(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Self::from_node(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn leaf(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Self::from_node(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn scalar(v: S) -> Self {
        Self::constant(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::constant(shape, vec![S::zero(); n])
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let n = shape.iter().product();
        Self::constant(shape, vec![v; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<S>> {
        self.node.data.borrow()
    }

    pub fn data_vec(&self) -> Vec<S> {
        self.node.data.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.node.data.borrow()[0]
    }

    /// Overwrite the raw data of a leaf/constant (used by the optimizer and
    /// finite differencing). Must not be called on interior graph nodes.
    pub fn set_data(&self, values: &[S]) {
        assert!(
            self.node.backward.is_none(),
            "set_data only applies to leaves"
        );
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn grad_vec(&self) -> Option<Vec<S>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.node.shape.clone()));
        }
        let order = topo_order(self);
        let mut flows: GradMap<S> = HashMap::new();
        flows.insert(self.ptr(), vec![S::one()]);
        for t in order.iter().rev() {
            if !t.node.requires_grad {
                continue;
            }
            match &t.node.backward {
                Some(back) => {
                    let Some(out_grad) = flows.remove(&t.ptr()) else {
                        continue;
                    };
                    let out_data = t.node.data.borrow();
                    let mut ctx = BackCtx {
                        out_grad: &out_grad,
                        out_data: &out_data,
                        parents: &t.node.parents,
                        flows: &mut flows,
                    };
                    back(&mut ctx);
                }
                None => {
                    if let Some(flow) = flows.remove(&t.ptr()) {
                        let mut g = t.node.grad.borrow_mut();
                        match g.as_mut() {
                            Some(existing) => {
                                for (a, b) in existing.iter_mut().zip(&flow) {
                                    *a += *b;
                                }
                            }
                            None => *g = Some(flow),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

type GradMap<S> = HashMap<usize, Vec<S>>;

/// Context handed to backward closures: the node's output gradient and
/// data, its parents, and the flowing-gradient sink.
pub(crate) struct BackCtx<'a, S: Scalar> {
    pub out_grad: &'a [S],
    pub out_data: &'a [S],
    pub parents: &'a [Tensor<S>],
    flows: &'a mut GradMap<S>,
}

impl<S: Scalar> BackCtx<'_, S> {
    /// Accumulate into parent `i`'s flowing gradient buffer. The closure
    /// receives the buffer (zero-initialized on first touch) and must add
    /// its contribution.
    pub fn add_to(&mut self, i: usize, write: impl FnOnce(&mut [S])) {
        let parent = &self.parents[i];
        if !parent.node.requires_grad {
            return;
        }
        let buf = self
            .flows
            .entry(parent.ptr())
            .or_insert_with(|| vec![S::zero(); parent.len()]);
        write(buf);
    }
}

/// Build an op node: records parents and the backward closure only when
/// gradients are enabled and some parent needs them.
pub(crate) fn make_op<S: Scalar>(
    shape: Vec<usize>,
    data: Vec<S>,
    parents: Vec<Tensor<S>>,
    backward: impl Fn(&mut BackCtx<'_, S>) + 'static,
) -> Tensor<S> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "op produced a non-finite value"
    );
    let record = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
    if record {
        Tensor::from_node(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            parents,
            backward: Some(Box::new(backward)),
        })
    } else {
        Tensor::from_node(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }
}

/// Iterative post-order DFS over parents.
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.ptr()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in &t.node.parents {
            if !visited.contains(&p.ptr()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let x = Tensor::leaf(vec![3], vec![1.0, -2.0, 3.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_doubles_leaf_grads() {
        let x = Tensor::leaf(vec![2], vec![1.0, 2.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn softmax_sum_is_constant_so_grad_is_zero() {
        let x = Tensor::<f64>::leaf(vec![4], vec![0.3, -1.0, 2.0, 0.1]);
        let loss = x.softmax_last().sum();
        loss.backward().unwrap();
        let g = x.grad_vec().unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12), "grad {g:?}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::leaf(vec![2], vec![1.0, 2.0]);
        assert_eq!(
            x.backward().unwrap_err(),
            TensorError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn no_grad_suppresses_graph_recording() {
        let x = Tensor::leaf(vec![2], vec![1.0, 2.0]);
        let y = no_grad(|| x.mul(&x).unwrap().sum());
        assert!(!y.requires_grad());
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let x = Tensor::<f64>::leaf(vec![4], vec![0.25, -0.5, 0.125, 3.0]);
        let run = || {
            no_grad(|| {
                x.sigmoid()
                    .mul(&x.relu())
                    .unwrap()
                    .softmax_last()
                    .data_vec()
            })
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}
