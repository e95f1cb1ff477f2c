//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable op pushes one [`Node`] holding its output value, the
//! [`Var`]s it read, and a [`Backward`] rule. Nodes are appended in execution
//! order, so walking the tape backwards is a valid topological order.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read-only view handed to a backward rule.
pub struct BackwardCtx<'a, T> {
    pub(crate) tape: &'a Tape<T>,
    pub(crate) node: usize,
}

impl<'a, T: Float> BackwardCtx<'a, T> {
    /// Value of the `i`-th input of the node being differentiated.
    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        let v = self.tape.nodes[self.node].inputs[i];
        &self.tape.nodes[v.0].value
    }

    pub fn output(&self) -> &'a Tensor<T> {
        &self.tape.nodes[self.node].value
    }
}

/// Gradient buffers for a node's inputs; `None` where no gradient is needed.
pub struct InputGrads<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Float> InputGrads<T> {
    pub fn get_mut(&mut self, i: usize) -> Option<&mut [T]> {
        self.bufs[i].as_deref_mut()
    }

    pub fn wants(&self, i: usize) -> bool {
        self.bufs[i].is_some()
    }

    /// Mutable access to two distinct inputs at once.
    pub fn pair_mut(&mut self, i: usize, j: usize) -> (Option<&mut [T]>, Option<&mut [T]>) {
        assert!(i < j);
        let (lo, hi) = self.bufs.split_at_mut(j);
        (lo[i].as_deref_mut(), hi[0].as_deref_mut())
    }

    /// Mutable access to three distinct inputs, in index order 0, 1, 2.
    pub fn triple_mut(&mut self) -> (Option<&mut [T]>, Option<&mut [T]>, Option<&mut [T]>) {
        let (a, rest) = self.bufs.split_at_mut(1);
        let (b, c) = rest.split_at_mut(1);
        (a[0].as_deref_mut(), b[0].as_deref_mut(), c.get_mut(0).and_then(|v| v.as_deref_mut()))
    }
}

/// The vector-Jacobian product of one recorded op.
pub trait Backward<T: Float> {
    fn name(&self) -> &'static str;

    /// Accumulate `∂loss/∂input` into `grads` given `grad_out = ∂loss/∂output`.
    fn backward(&self, ctx: &BackwardCtx<'_, T>, grad_out: &[T], grads: &mut InputGrads<T>);
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    name: &'static str,
}

/// Records executed operations. Owned by one thread at a time.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    first_non_finite: Option<(usize, &'static str)>,
    fault: Option<&'static str>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), first_non_finite: None, fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient will be reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient (inputs, targets, fixed buffers).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.note_finite(&value, "leaf");
        self.nodes.push(Node { value, inputs: Vec::new(), rule: None, requires_grad, name: "leaf" });
        Var(self.nodes.len() - 1)
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

    /// Record an op result. Used by every op constructor, including those
    /// defined outside this module.
    pub fn push(&mut self, value: Tensor<T>, inputs: Vec<Var>, rule: impl Backward<T> + 'static) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let name = rule.name();
        self.note_finite(&value, name);
        let rule: Option<Box<dyn Backward<T>>> = if requires_grad { Some(Box::new(rule)) } else { None };
        self.nodes.push(Node { value, inputs, rule, requires_grad, name });
        Var(self.nodes.len() - 1)
    }

    fn note_finite(&mut self, value: &Tensor<T>, name: &'static str) {
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((self.nodes.len(), name));
        }
    }

    /// Name and tape position of the first op that produced NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.first_non_finite
    }

    /// Error naming the first non-finite op, if any.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite {
            None => Ok(()),
            Some((pos, op)) => {
                Err(Error::Numeric { op: op.to_string(), detail: format!("first non-finite value produced at tape position {pos}") })
            }
        }
    }

    /// Test hook: scale every gradient produced by the named op's backward
    /// rule by 1.1, so gradient checks of that op must fail.
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.fault = Some(op_name);
    }

    /// Back-propagate from a scalar `loss`, returning gradients for every
    /// node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::usage(format!("backward needs a scalar loss, got shape {:?}", loss_value.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.rule.as_ref() else { continue };
            let Some(grad_out) = grads[idx].take() else { continue };
            let mut input_grads = InputGrads {
                bufs: node
                    .inputs
                    .iter()
                    .map(|v| {
                        let n = &self.nodes[v.0];
                        n.requires_grad.then(|| vec![T::zero(); n.value.len()])
                    })
                    .collect(),
            };
            rule.backward(&BackwardCtx { tape: self, node: idx }, &grad_out, &mut input_grads);
            if self.fault == Some(node.name) {
                let bump = T::lit(1.1);
                for buf in input_grads.bufs.iter_mut().flatten() {
                    buf.iter_mut().for_each(|g| *g *= bump);
                }
            }
            for (v, buf) in node.inputs.iter().zip(input_grads.bufs) {
                let Some(buf) = buf else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&buf).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(buf),
                }
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(idx, g)| {
                let node = &self.nodes[idx];
                match g {
                    Some(g) if node.inputs.is_empty() && node.requires_grad => {
                        Some(Tensor::from_vec(node.value.shape(), g).expect("gradient shape"))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar loss with respect to the tape's parameter leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf. Parameters the loss does not depend on get zeros.
    pub fn get(&self, tape: &Tape<T>, v: Var) -> Option<Tensor<T>> {
        if !tape.requires_grad(v) || !tape.nodes[v.0].inputs.is_empty() {
            return None;
        }
        Some(self.grads.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
    }

    /// Move a leaf's gradient out, or zeros if the loss does not reach it.
    pub fn take(&mut self, tape: &Tape<T>, v: Var) -> Option<Tensor<T>> {
        if !tape.requires_grad(v) || !tape.nodes[v.0].inputs.is_empty() {
            return None;
        }
        Some(self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
    }

    /// Number of leaves that received a gradient.
    pub fn reached(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}
