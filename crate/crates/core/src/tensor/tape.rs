use std::sync::Arc;

use super::ops::{self, Op};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Append-only record of a forward pass.
///
/// Nodes are stored in execution order, so every op's inputs precede it and a
/// single reverse sweep visits each op once. `backward` may run only once per
/// tape; a second call is rejected with a usage error so gradients can never
/// be silently double-accumulated. Build a fresh tape for the next pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    branches: Option<BranchLog>,
}

/// Running hash of which side of its kink every ReLU/abs input fell on.
#[derive(Default)]
struct BranchLog {
    hash: u64,
}

impl BranchLog {
    fn record(&mut self, xs: &[f64]) {
        // FNV-1a over one sign bit per element.
        for &x in xs {
            self.hash ^= u64::from(x > 0.0);
            self.hash = self.hash.wrapping_mul(0x0100_0000_01b3);
        }
        self.hash ^= 0xff;
        self.hash = self.hash.wrapping_mul(0x0100_0000_01b3);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape that also fingerprints the branch taken by every nonsmooth op,
    /// so two evaluations can be compared for kink crossings.
    pub fn with_branch_tracking() -> Self {
        Tape {
            branches: Some(BranchLog {
                hash: 0xcbf2_9ce4_8422_2325,
            }),
            ..Self::default()
        }
    }

    /// Branch fingerprint, if tracking is enabled.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(|b| b.hash)
    }

    pub(crate) fn record_branches(&mut self, a: Var) {
        if let Some(log) = self.branches.as_mut() {
            log.record(self.nodes[a.0].value.data());
        }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.leaf_shared(Arc::new(value), true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf_shared(Arc::new(value), false)
    }

    /// Records a value shared with its owner (e.g. a parameter store) without
    /// copying it.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs do not need their bookkeeping.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse sweep from a scalar `loss`. Afterwards [`Tape::grad`] returns
    /// d loss / d v for every node that requires a gradient and lies on a path
    /// to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::usage(
                "backward already ran on this tape; record a new tape for another pass",
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ops::backward_node(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_rejected_and_grads_survive() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]));
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        let first = t.grad(x).unwrap().clone();
        assert!(matches!(t.backward(s), Err(Error::Usage(_))));
        assert_eq!(t.grad(x).unwrap(), &first);
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0]));
        let a = t.scale(x, 3.0);
        let b = t.scale(x, 4.0);
        let c = t.add(a, b).unwrap();
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0]));
        let c = t.constant(Tensor::vector(vec![5.0]));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().data(), &[5.0]);
    }
}
