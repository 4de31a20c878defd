use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::dense::{Result, Tensor, TensorError};
use super::scalar::Scalar;

/// Vector-Jacobian product of one recorded op: maps the output gradient to
/// one optional gradient per parent, in parent order.
pub(crate) type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<Backward<T>>,
}

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Reverse-mode tape. Records one forward pass; `backward` consumes it and
/// further recording fails until [`Tape::reset`] is called.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            is_leaf: true,
            backward: None,
        })
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Tensor<T> {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    fn push(&self, node: Node<T>) -> Result<Var> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Ok(Var(nodes.len() - 1))
    }

    /// Records an op result. The backward closure is dropped when no parent
    /// needs a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            if cfg!(debug_assertions)
                && parents.iter().all(|p| nodes[p.0].value.all_finite())
            {
                debug_assert!(value.all_finite(), "non-finite output from finite inputs");
            }
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            is_leaf: false,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Runs reverse accumulation from a scalar `loss` and marks the tape
    /// consumed. Every trainable leaf gets a gradient; leaves the loss does
    /// not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape().to_vec()));
        let mut out = HashMap::new();
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if node.is_leaf {
                if node.requires_grad {
                    out.insert(id, grad);
                }
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                grads[pid] = Some(match grads[pid].take() {
                    None => pg,
                    Some(acc) => accumulate(acc, &pg),
                });
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad && !out.contains_key(&id) {
                out.insert(id, Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.consumed.set(true);
        Ok(Gradients { grads: out })
    }
}

fn accumulate<T: Scalar>(acc: Tensor<T>, add: &Tensor<T>) -> Tensor<T> {
    let shape = acc.shape().to_vec();
    let mut data = match Arc::try_unwrap(into_arc(acc)) {
        Ok(v) => v,
        Err(shared) => shared.as_ref().clone(),
    };
    for (a, &b) in data.iter_mut().zip(add.data()) {
        *a = *a + b;
    }
    Tensor::from_parts(shape, data)
}

fn into_arc<T: Scalar>(t: Tensor<T>) -> Arc<Vec<T>> {
    t.into_storage()
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var.0)
    }

    /// Gradient of a trainable leaf.
    ///
    /// # Panics
    /// If `var` is not a trainable leaf of the tape.
    pub fn wrt(&self, var: Var) -> &Tensor<T> {
        self.grads
            .get(&var.0)
            .unwrap_or_else(|| panic!("{var:?} is not a trainable leaf"))
    }
}
