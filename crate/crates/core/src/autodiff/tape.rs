//! Reverse-mode tape.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order; backward walks it in reverse and visits each recorded
//! operation once. Adjoints are accumulated in a fixed order, which makes two
//! identical forward+backward passes produce bit-identical gradients.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Inputs handed to an adjoint: parent values, the forward output, the
/// upstream gradient and which parents need a gradient.
pub struct BackwardArgs<'a, T: Float> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    pub wants: Vec<bool>,
}

/// Adjoint of a recorded operation; returns one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Float> {
    value: Option<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    leaf: bool,
    param: Option<usize>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    consumed: Cell<bool>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Float = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()), consumed: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every node and gradient so the tape can be reused.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
        self.consumed.set(false);
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool, param: Option<usize>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Some(value), parents: Vec::new(), backward: None, requires_grad, leaf: true, param });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Input that takes part in differentiation.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true, None)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false, None)
    }

    /// Leaf bound to parameter slot `param` of a parameter store.
    pub fn param(&self, value: Tensor<T>, param: usize) -> Var<'_, T> {
        self.push_leaf(value, true, Some(param))
    }

    /// Records an operation. The adjoint is dropped when no parent needs a gradient.
    pub fn record<F>(&self, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Result<Var<'_, T>>
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        if self.consumed.get() {
            return Err(Error::Usage("tape already ran backward; call reset() first".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let parent_ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = parent_ids.iter().any(|&p| nodes[p].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node { value: Some(value), parents: parent_ids, backward, requires_grad, leaf: false, param: None });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| {
            n[id].value.as_ref().expect("intermediate value released by backward")
        })
    }

    /// Runs the adjoints from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::Usage("backward already ran on this tape; call reset() first".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        {
            let lv = nodes[loss.id].value.as_ref().expect("loss value");
            if !lv.is_scalar() {
                return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
            }
        }
        let n = nodes.len();
        let mut adjoint: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            adjoint[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            let node = &nodes[id];
            if node.leaf {
                if node.requires_grad {
                    leaf_grads[id] = Some(g);
                }
                continue;
            }
            let Some(bw) = node.backward.as_ref() else { continue };
            let inputs: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| nodes[p].value.as_ref().expect("parent value")).collect();
            let wants: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let args = BackwardArgs { inputs, output: node.value.as_ref().unwrap(), grad: &g, wants };
            let parent_grads = bw(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut adjoint[p] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(pg) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Release adjoints and intermediates; leaves keep their values.
        for node in nodes.iter_mut() {
            node.backward = None;
            node.parents.clear();
            if !node.leaf {
                node.value = None;
            }
        }
        // Reachable leaves that received no adjoint (zero-gradient paths) still get a buffer.
        for (id, node) in nodes.iter().enumerate() {
            if node.leaf && node.requires_grad && leaf_grads[id].is_none() && id <= loss.id {
                leaf_grads[id] = Some(vec![T::zero(); node.value.as_ref().unwrap().numel()]);
            }
        }
        *self.grads.borrow_mut() = leaf_grads;
        self.consumed.set(true);
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let nodes = self.nodes.borrow();
        let shape = nodes[var.id].value.as_ref()?.shape().to_vec();
        Some(Tensor::from_parts(shape, g.clone()))
    }

    /// `(param slot, gradient)` for every parameter-bound leaf, in record order.
    pub fn param_grads(&self) -> Vec<(usize, Vec<T>)> {
        let grads = self.grads.borrow();
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| {
                let slot = n.param?;
                let g = grads.get(id)?.as_ref()?;
                Some((slot, g.clone()))
            })
            .collect()
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn second_backward_is_rejected_until_reset() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Usage(_))));
        assert!(x.sum().is_err());
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.var(Tensor::ones(&[2]));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::new(&[3], vec![0.5, -1.0, 4.0]).unwrap());
        tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let loss = x.mul(&x).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let x = tape.var(Tensor::ones(&[2]));
        let loss = x.mul(&c).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert!(c.grad().is_none());
        assert!(x.grad().is_some());
    }

    #[test]
    fn unused_leaf_gets_zero_buffer() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::ones(&[2]));
        let y = tape.var(Tensor::ones(&[4]));
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(y.grad().unwrap().data(), &[0.0; 4]);
    }
}
