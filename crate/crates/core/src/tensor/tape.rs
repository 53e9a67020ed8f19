use std::cell::{Ref, RefCell};
use std::fmt;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub grad: Option<Tensor>,
    pub op: Op,
}

/// Define-by-run record of every value produced while building a graph.
///
/// Nodes are appended in creation order, so every operation's inputs
/// precede it and reverse index order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an input value. Only leaves with `requires_grad` receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        })
    }

    /// Shorthand for a leaf that never requires gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        // Ops with no differentiable input are recorded as constants so that
        // cached backward state is dropped immediately.
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(Node {
            value,
            requires_grad,
            grad: None,
            op,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Accumulated gradient of a node, present only after a backward pass
    /// reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients from all consumers of a node are summed before the node
    /// propagates, and leaf gradients add onto whatever earlier backward
    /// calls left there.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut buffers: Vec<Option<Tensor>> = {
            let nodes = self.nodes.borrow();
            let out = &nodes[loss.id];
            if !out.value.is_scalar() {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    out.value.shape()
                )));
            }
            if !out.requires_grad {
                return Ok(());
            }
            let mut buffers: Vec<Option<Tensor>> = (0..=loss.id).map(|_| None).collect();
            buffers[loss.id] = Some(Tensor::from_parts(out.value.shape().to_vec(), vec![1.0]));
            for id in (0..=loss.id).rev() {
                let Some(g) = buffers[id].take() else {
                    continue;
                };
                let node = &nodes[id];
                if matches!(node.op, Op::Leaf) {
                    buffers[id] = Some(g);
                    continue;
                }
                node.op
                    .backward(&node.value, &g, &nodes, &mut |input, contribution| {
                        if !nodes[input].requires_grad {
                            return;
                        }
                        match &mut buffers[input] {
                            Some(acc) => acc.add_assign(&contribution),
                            slot @ None => *slot = Some(contribution),
                        }
                    });
            }
            buffers
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in buffers.iter_mut().enumerate() {
            if let Some(g) = g.take() {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the node's value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    /// Value-identical node with no linkage to this one: nothing consuming
    /// the result can send gradient back through it.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}
