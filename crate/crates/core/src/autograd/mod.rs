//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operator applied during a forward pass. Each
//! recorded node keeps its output value and a closure computing the
//! vector-Jacobian product for its inputs. [`Tape::backward`] replays the
//! nodes in reverse order, accumulating gradients into the leaves.

mod conv;
mod linear;
mod loss;
mod norm;
mod pointwise;
mod spatial;
mod structural;

pub use conv::{conv2d_forward, conv_output_size, ConvSpec};
pub use norm::BatchStats;
pub use loss::{smooth_l1, smooth_l1_grad};
pub use pointwise::sigmoid;

use crate::error::{reject, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Arguments handed to a node's backward closure.
pub(crate) struct BackwardArgs<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// Whether each input wants a gradient; closures may skip work otherwise.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    kinks: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input node. Leaves that require grad receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Fingerprint of which side of every kink (ReLU zero, loss clamp) each
    /// element fell on during the forward pass. Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the recorded function,
    /// barring hash collisions.
    pub fn kink_pattern(&self) -> u64 {
        self.kinks
    }

    /// Folds the active set of a piecewise op into [`Tape::kink_pattern`].
    pub(crate) fn record_kinks(&mut self, active: impl Iterator<Item = bool>) {
        let op = (self.nodes.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        for (i, on) in active.enumerate() {
            if on {
                let mut z = op ^ (i as u64);
                z = (z ^ (z >> 31)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                self.kinks = self.kinks.wrapping_add(z ^ (z >> 29));
            }
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.nodes.push(Node { value, parents, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from the scalar node `root`.
    ///
    /// Gradients of leaf nodes are retained and readable through
    /// [`Tape::grad`]; intermediate gradients are released as soon as they have
    /// been propagated. Calling `backward` again resets all gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if root_shape.numel() != 1 {
            reject!("backward root must be a scalar, got shape {root_shape}");
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let args = BackwardArgs {
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[p.0].value.shape());
                match &mut self.grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated into a leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        reject!("{op}: shape mismatch {a} vs {b}");
    }
    Ok(())
}
