//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Node ids are
//! assigned in creation order, so walking them backwards is a valid reverse
//! topological order. Graphs are rebuilt for every forward pass and are not
//! `Send`; run independent graphs on independent threads instead.

mod conv;
mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use conv::ConvSpec;
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use ops::OpKind;
pub(crate) use ops::sigmoid;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Vector-Jacobian product for one recorded operation.
///
/// `needs[i]` tells whether input `i` wants a gradient; implementations may
/// return `None` for inputs that do not.
pub trait Backward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<Box<dyn Backward>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Value<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Value<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Value")
            .field("id", &self.id)
            .field("shape", &self.tensor().shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Input that will receive a gradient.
    pub fn param(&self, tensor: Tensor) -> Value<'_> {
        self.push(tensor, Vec::new(), None, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Value<'_> {
        self.push(tensor, Vec::new(), None, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        tensor: Tensor,
        parents: Vec<usize>,
        backward: Option<Box<dyn Backward>>,
        requires_grad: bool,
    ) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(tensor), parents, backward, requires_grad });
        Value { graph: self, id }
    }

    /// Records `output` as the result of `op` applied to `inputs`. The
    /// backward closure is dropped when no input requires a gradient.
    pub fn record(
        &self,
        inputs: &[Value<'_>],
        output: Tensor,
        op: impl Backward + 'static,
    ) -> Value<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.graph, self), "value from another graph");
                nodes[v.id].requires_grad
            })
        };
        if requires_grad {
            let parents = inputs.iter().map(|v| v.id).collect();
            self.push(output, parents, Some(Box::new(op)), true)
        } else {
            self.push(output, Vec::new(), None, false)
        }
    }

    /// Accumulates `d root / d v` into every reachable value that requires a
    /// gradient. Gradients from earlier calls are kept and summed; call
    /// [`Graph::zero_grad`] to reset.
    pub fn backward(&self, root: Value<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", root_node.value.shape()),
            ));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; root.id + 1];
        pending[root.id] = Some(Tensor::full(root_node.value.shape(), 1.0));
        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for id in (0..=root.id).rev() {
            let Some(grad) = pending[id].take() else { continue };
            let node = &nodes[id];
            if let Some(op) = &node.backward {
                let inputs: Vec<&Tensor> =
                    node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
                let needs: Vec<bool> =
                    node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = op.backward(&inputs, &node.value, &grad, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(g) = g else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), nodes[p].value.shape());
                    match &mut pending[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            } else if node.requires_grad {
                match &mut grads[id] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Gradient of a leaf after [`Graph::backward`]; zeros when the leaf was
    /// unreachable from the root.
    pub fn grad(&self, v: Value<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        if !node.requires_grad || node.backward.is_some() {
            return None;
        }
        let grads = self.grads.borrow();
        Some(
            grads
                .get(v.id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
        )
    }
}

impl<'g> Value<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn tensor(&self) -> Rc<Tensor> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tensor().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the graph: gradients stop here.
    pub fn detach(&self) -> Value<'g> {
        let t = (*self.tensor()).clone();
        self.graph.constant(t)
    }
}
