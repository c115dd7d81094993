//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Nodes are appended in execution order, so the tape order is already a
//! topological order and the backward pass simply walks it in reverse.

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{contract_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
pub trait Backward<T: Scalar> {
    /// Maps the gradient w.r.t. the output to one gradient per input, in
    /// input order. `None` means the input receives no contribution.
    /// `wants[i]` is false when input `i` does not need a gradient, which
    /// lets expensive rules skip that work.
    fn backward(&self, grad: &[T], inputs: &[&Tensor<T>], output: &Tensor<T>, wants: &[bool])
        -> Vec<Option<Vec<T>>>;
}

enum Origin<T> {
    Constant,
    Input,
    Param(ParamId),
    Op { inputs: Vec<Var>, backward: Box<dyn Backward<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    origin: Origin<T>,
}

/// One differentiation context. Tapes are single-threaded; independent tapes
/// can run concurrently against the same read-only [`ParamStore`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    macs: u64,
    /// Running hash of ReLU activation patterns, when tracked.
    kinks: Option<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true, macs: 0, kinks: None }
    }

    /// A tape that records values only. Nothing is kept for backward.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false, macs: 0, kinks: None }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of the convolutions and matrix products run so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Starts hashing which side of zero every ReLU input falls on. Two
    /// evaluations with equal signatures lie in the same linear piece of
    /// every ReLU.
    pub fn track_kinks(mut self) -> Self {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    pub(crate) fn note_kinks(&mut self, x: Var) {
        if let Some(mut h) = self.kinks {
            for v in self.value(x).data() {
                h = (h ^ u64::from(*v > T::zero())).wrapping_mul(0x100_0000_01b3);
            }
            self.kinks = Some(h);
        }
    }

    pub(crate) fn add_macs(&mut self, n: u64) {
        self.macs += n;
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node { value, requires_grad: false, origin: Origin::Constant })
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push(Node { value, requires_grad, origin: Origin::Input })
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.tensor(id).clone();
        let requires_grad = self.grad_enabled && store.get(id).kind == super::ParamKind::Trainable;
        self.push(Node { value, requires_grad, origin: Origin::Param(id) })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records the result of an operation together with its backward rule.
    pub fn push_op(&mut self, value: Tensor<T>, inputs: &[Var], backward: impl Backward<T> + 'static) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let origin = if requires_grad {
            Origin::Op { inputs: inputs.to_vec(), backward: Box::new(backward) }
        } else {
            Origin::Constant
        };
        self.push(Node { value, requires_grad, origin })
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Gradients of scalar `loss` w.r.t. every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(contract_err!("backward on an empty tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.origin {
                Origin::Param(id) => {
                    if grads[idx].is_some() {
                        params.push((*id, Var(idx)));
                    }
                }
                Origin::Op { inputs, backward } => {
                    let Some(g) = grads[idx].take() else { continue };
                    let in_vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let wants: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let in_grads = backward.backward(&g, &in_vals, &node.value, &wants);
                    assert_eq!(in_grads.len(), inputs.len());
                    for (v, ig) in inputs.iter().zip(in_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.nodes[v.0].requires_grad {
                            continue;
                        }
                        assert_eq!(ig.len(), self.nodes[v.0].value.numel());
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                    // Keep the gradient of the loss node itself queryable.
                    if idx == loss.0 {
                        grads[idx] = Some(g);
                    }
                }
                Origin::Constant | Origin::Input => {}
            }
        }
        params.sort_by_key(|(id, v)| (*id, v.0));
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store. A parameter used several
    /// times on the tape receives the sum, in tape order.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate_grad(*id, g);
            }
        }
    }
}
