//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. Each recorded node keeps its forward value and a backward closure
//! mapping the upstream gradient to per-input gradients. [`Tape::backward`]
//! walks the nodes once, in reverse, accumulating gradients additively so
//! fan-out is handled by summation.
//!
//! ```
//! use aila::autodiff::Tape;
//! use aila::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let loss = x.mul(&x).unwrap().sum().unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Tapes are single-threaded (`!Send`); build one per evaluation.

mod lstm;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use lstm::{lstm_cell_step, lstm_sequence, LstmParams};
pub use ops::DEFAULT_LN_EPS;
pub(crate) use ops::{sigmoid, softmax_values};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What a backward closure sees: forward values of its inputs and output,
/// plus the gradient flowing into the output.
pub struct BackwardCtx<'a> {
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Tensor,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Ordered record of operations. Cloning a `Tape` yields another handle to
/// the same recording.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op)
            .field("shape", &node.value.shape())
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op: "leaf",
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a custom operation. `forward` receives the input values and
    /// returns the output value; `backward` maps the output gradient to
    /// per-input gradients (same order as `inputs`).
    pub fn record<F, B>(&self, op: &'static str, inputs: &[&Var], forward: F, backward: B) -> Result<Var>
    where
        F: FnOnce(&[&Tensor]) -> Result<Tensor>,
        B: Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>> + 'static,
    {
        for v in inputs {
            if !Rc::ptr_eq(&v.tape.inner, &self.inner) {
                return Err(Error::Contract(format!("`{op}` mixes variables from different tapes")));
            }
        }
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let (value, requires_grad) = {
            let inner = self.inner.borrow();
            let vals: Vec<&Tensor> = ids.iter().map(|&i| &inner.nodes[i].value).collect();
            let value = forward(&vals)?;
            if !value.all_finite() && vals.iter().all(|v| v.all_finite()) {
                return Err(Error::NonFinite { op });
            }
            let rg = ids.iter().any(|&i| inner.nodes[i].requires_grad);
            (value, rg)
        };
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            value,
            requires_grad,
            inputs: ids,
            backward: Some(Box::new(backward)),
        });
        Ok(Var {
            tape: self.clone(),
            id: inner.nodes.len() - 1,
        })
    }

    /// Reverse pass from a scalar `loss`. Visits each recorded node at most
    /// once, newest first.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&loss.tape.inner, &self.inner) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let inner = self.inner.borrow();
        let root = &inner.nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| inner.nodes[i].requires_grad).collect();
            let vals: Vec<&Tensor> = node.inputs.iter().map(|&i| &inner.nodes[i].value).collect();
            let ctx = BackwardCtx {
                inputs: &vals,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            };
            let input_grads = backward(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "backward arity for {}", node.op);
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else { continue };
                debug_assert_eq!(g.shape(), inner.nodes[input].value.shape(), "grad shape for {}", node.op);
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Clones the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` when `var` does
    /// not require a gradient or is unreachable from the loss.
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        if !var.requires_grad() {
            return None;
        }
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -1.0, 2.0, 5.0, 7.0]));
        let loss = x.sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 5]);
        assert_eq!(g.get(&loss).unwrap().data(), &[1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = x.relu().unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(relu(x)) + sum(3x); grad = 1[x>0] + 3
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
        let a = x.relu().unwrap().sum().unwrap();
        let b = x.scale(3.0).unwrap().sum().unwrap();
        let loss = a.add(&b).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0]));
        let c = tape.constant(Tensor::vector(vec![2.0]));
        let loss = x.mul(&c).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.get(&c).is_none());
        assert_eq!(g.get(&x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.param(Tensor::vector(vec![1.0]));
        let b = t2.param(Tensor::vector(vec![1.0]));
        assert!(matches!(a.add(&b), Err(Error::Contract(_))));
    }
}
