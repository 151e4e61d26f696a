//! Reverse-mode autodiff on a growing tape.
//!
//! A [`Tape`] owns an arena of nodes in topological order (every node's
//! parents have smaller ids, guaranteed by construction since ops can only
//! reference existing nodes). [`Var`] is a copyable handle into the arena.
//! [`Tape::backward`] walks ids in reverse, so no explicit sort is needed.
//!
//! Gradients only flow into nodes marked as requiring them. Leaves created
//! with [`Tape::leaf`] require gradients, [`Tape::constant`] does not, and
//! interior nodes require them iff any parent does. Ops skip building
//! backward closures entirely when no parent needs a gradient, which makes a
//! forward pass over constants allocation-light.

use std::cell::{Ref, RefCell};

use super::dense::{Tensor, TensorError};
use super::scalar::Scalar;

/// Arguments handed to a node's backward closure.
pub(crate) struct BackArgs<'a, T: Scalar> {
    /// Gradient of the loss w.r.t. this node's value.
    pub grad: &'a Tensor<T>,
    /// Parent values, in the order the op registered them.
    pub parents: &'a [&'a Tensor<T>],
    /// This node's forward value.
    pub value: &'a Tensor<T>,
    /// Which parents actually need a gradient. Closures may return `None`
    /// for the others to skip the work.
    pub needs: &'a [bool],
}

pub(crate) type BackFn<T> = Box<dyn Fn(&BackArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    needs_grad: bool,
    back: Option<BackFn<T>>,
}

/// Handle to a tape node. Cheap to copy; tied to the tape's lifetime.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<'t, T: Scalar> std::fmt::Debug for Var<'t, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value().shape())
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Borrow of the forward value. Do not hold across op calls.
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }
}

/// Gradient arena produced by [`Tape::backward`]. Only leaves (and constants
/// the walk never consumed) retain entries; interior gradients are freed as
/// soon as they have been propagated.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    slots: Vec<Option<Tensor<T>>>,
    tape_ptr: *const (),
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        debug_assert_eq!(self.tape_ptr, v.tape as *const Tape<T> as *const ());
        self.slots.get(v.id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        debug_assert_eq!(self.tape_ptr, v.tape as *const Tape<T> as *const ());
        self.slots.get_mut(v.id).and_then(|s| s.take())
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value node that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), false, None)
    }

    /// Trainable input; `backward` will produce a gradient slot for it.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), true, None)
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        needs_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            needs_grad,
            back,
        });
        Var { tape: self, id }
    }

    /// Registers an op node. `make_back` is only invoked when some parent
    /// needs a gradient.
    pub(crate) fn push_op(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        make_back: impl FnOnce() -> BackFn<T>,
    ) -> Var<'_, T> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        let back = needs_grad.then(make_back);
        self.push(value, parents, needs_grad, back)
    }

    /// Reverse-mode sweep from a scalar loss. Returns per-leaf gradients.
    ///
    /// Interior gradients are dropped once consumed so peak memory stays
    /// proportional to the widest layer, not the whole tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        slots[loss.id] = Some(Tensor::full(loss_node.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            if slots[id].is_none() || !nodes[id].needs_grad {
                continue;
            }
            let node = &nodes[id];
            let Some(back) = &node.back else {
                continue; // leaf: keep its slot for the caller
            };
            let grad = slots[id].take().expect("checked above");
            let parent_vals: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let args = BackArgs {
                grad: &grad,
                parents: &parent_vals,
                value: &node.value,
                needs: &needs,
            };
            let pgrads = back(&args);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "backward shape mismatch into node {p}"
                );
                match &mut slots[p] {
                    Some(acc) => acc.axpy(&pg, T::one()),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients {
            slots,
            tape_ptr: self as *const Tape<T> as *const (),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_produce_no_gradient() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::scalar(3.0));
        let b = tape.constant(Tensor::scalar(4.0));
        let y = a.mul(b).unwrap().sum();
        let mut g = tape.backward(y).unwrap();
        assert_eq!(g.take(a).unwrap().item(), 4.0);
        assert!(g.take(b).is_none());
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        // y = a*a + a  =>  dy/da = 2a + 1 = 5
        let y = a.mul(a).unwrap().add(a).unwrap().sum();
        let mut g = tape.backward(y).unwrap();
        assert_eq!(g.take(a).unwrap().item(), 5.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3]));
        let err = tape.backward(a).unwrap_err();
        assert!(err.to_string().contains("[3]"), "{err}");
    }

    #[test]
    fn forward_over_constants_attaches_no_backward() {
        let tape: Tape<f32> = Tape::new();
        let a = tape.constant(Tensor::full(&[4], 2.0));
        let y = a.relu().scale(3.0);
        assert!(!y.needs_grad());
    }
}
