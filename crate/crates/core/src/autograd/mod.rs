//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op executed on [`Var`]s appends one node holding its output value,
//! parent ids and a backward rule. [`Tape::backward`] walks the nodes in
//! reverse execution order exactly once and accumulates gradients into the
//! leaves. Leaf gradients persist across `backward` calls until
//! [`Tape::zero_grad`] is called.
//!
//! A tape is single-threaded (`!Sync`); concurrent work uses one tape per
//! worker.

mod gradcheck;
pub(crate) mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::grad_check;
pub use ops::{cross_entropy_per_sample, gelu, Conv2dGeometry};

/// Inputs handed to a node's backward rule.
pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub parents: &'a [Rc<Tensor>],
    pub out: &'a Tensor,
    /// Whether each parent needs a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    leaf: bool,
}

#[derive(Default)]
pub struct Tape {
    values: RefCell<Vec<Rc<Tensor>>>,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Gradients are collected for it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(
            Rc::new(value),
            Node {
                parents: Vec::new(),
                backward: None,
                requires_grad,
                leaf: true,
            },
        )
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push_node(&self, value: Rc<Tensor>, node: Node) -> Var<'_> {
        let mut values = self.values.borrow_mut();
        let id = values.len();
        values.push(value);
        self.nodes.borrow_mut().push(node);
        self.grads.borrow_mut().push(None);
        Var { tape: self, id }
    }

    pub(crate) fn push_op(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_node(
            Rc::new(value),
            Node {
                parents: parents.iter().map(|p| p.id).collect(),
                backward: requires_grad.then_some(backward),
                requires_grad,
                leaf: false,
            },
        )
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.values.borrow()[id])
    }

    /// Back-propagates from a single-element `loss`, adding into leaf grads.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let loss_value = self.value(loss.id);
        if loss_value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let values = self.values.borrow();
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));
        let mut leaf_grads = self.grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.leaf {
                match &mut leaf_grads[id] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
                continue;
            }
            let Some(rule) = &node.backward else { continue };
            let parents: Vec<Rc<Tensor>> = node.parents.iter().map(|&p| Rc::clone(&values[p])).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let ctx = BackwardCtx {
                grad: &grad,
                parents: &parents,
                out: &values[id],
                needs: &needs,
            };
            for (&p, g) in node.parents.iter().zip(rule(&ctx)) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut pending[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads.borrow()[var.id].clone()
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.values.borrow()[self.id].shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}
