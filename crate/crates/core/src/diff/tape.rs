//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; an operation stores a [`BackwardOp`] only when one of its
//! inputs requires a gradient, so the same forward code serves both training
//! (with parameter leaves) and inference (with constant parameters).
//!
//! Gradients of intermediate nodes are released as soon as they have been
//! propagated; only leaves created with [`Tape::leaf`] keep theirs.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// Implementations read their inputs' values through `ctx` and add their
/// contribution to each input gradient. Gradients must be accumulated, never
/// overwritten, because a value may feed several operations.
pub trait BackwardOp {
    fn backward(&self, ctx: &mut BackwardCtx<'_>, out: &Tensor, grad_out: &[f64]);
}

struct Node {
    value: Tensor,
    op: Option<Box<dyn BackwardOp>>,
    requires_grad: bool,
}

pub struct BackwardCtx<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> BackwardCtx<'a> {
    #[inline]
    pub fn value(&self, v: Var) -> &'a Tensor {
        let nodes: &'a [Node] = self.nodes;
        &nodes[v.0].value
    }

    #[inline]
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer of `v`, zero-initialized on first use; `None`
    /// when `v` does not require a gradient.
    pub fn grad_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(buf) = self.grad_mut(v) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` means identically zero.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as an owned buffer of length `len`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a tape holding
    /// bound parameters can be reused across inference steps.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Differentiable leaf, typically a trainable parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an operation result. `make_op` is only invoked when some
    /// input requires a gradient.
    pub fn push_op<F, O>(&mut self, value: Tensor, inputs: &[Var], make_op: F) -> Var
    where
        F: FnOnce() -> O,
        O: BackwardOp + 'static,
    {
        let requires_grad = self.any_requires_grad(inputs);
        let op: Option<Box<dyn BackwardOp>> = if requires_grad {
            Some(Box::new(make_op()))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss {
                rows: lv.rows,
                cols: lv.cols,
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let (before, _) = grads.split_at_mut(i);
            let mut ctx = BackwardCtx {
                nodes: &self.nodes,
                grads: before,
            };
            op.backward(&mut ctx, &node.value, &g);
        }
        Ok(Gradients { grads })
    }
}
