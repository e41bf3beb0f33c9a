//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so a reverse sweep over the tape visits
//! each node after all of its consumers. Graphs are single-use: one forward
//! pass, one call to [`Graph::backward`].

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::numel;
use super::{NumericsError, Scalar, Tensor};

pub(crate) type BackwardFn<S> = Box<dyn Fn(&[S], &mut GradSink<'_, S>)>;

pub(crate) struct Node<S> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Rc<Vec<S>>,
    pub(crate) needs_grad: bool,
    pub(crate) backward: Option<BackwardFn<S>>,
}

pub struct Graph<S: Scalar = f64> {
    nodes: RefCell<Vec<Node<S>>>,
    params: RefCell<HashMap<usize, usize>>,
    non_finite: Cell<Option<&'static str>>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar = f64> {
    pub(crate) graph: &'g Graph<S>,
    pub(crate) id: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Accumulates gradient contributions into parent nodes during the sweep.
pub(crate) struct GradSink<'a, S> {
    grads: &'a mut [Option<Vec<S>>],
    needs: &'a [bool],
    lens: &'a [usize],
}

impl<S: Scalar> GradSink<'_, S> {
    #[inline]
    pub(crate) fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Mutable buffer for the gradient of `id`, zero-initialised on first use.
    pub(crate) fn buf(&mut self, id: usize) -> &mut [S] {
        let len = self.lens[id];
        self.grads[id].get_or_insert_with(|| vec![S::zero(); len])
    }

    pub(crate) fn add(&mut self, id: usize, delta: &[S]) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn add_owned(&mut self, id: usize, delta: Vec<S>) {
        if !self.needs[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            params: RefCell::new(HashMap::new()),
            non_finite: Cell::new(None),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push_leaf(&self, shape: Vec<usize>, values: Vec<S>, needs_grad: bool) -> Var<'_, S> {
        assert_eq!(numel(&shape), values.len(), "leaf shape {:?} does not match {} values", shape, values.len());
        self.check_finite("leaf", &values);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value: Rc::new(values), needs_grad, backward: None });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Records an operation. `backward` is dropped when no input needs a gradient.
    pub(crate) fn push_op(
        &self,
        op: &'static str,
        shape: Vec<usize>,
        values: Vec<S>,
        inputs: &[usize],
        backward: impl Fn(&[S], &mut GradSink<'_, S>) + 'static,
    ) -> Var<'_, S> {
        debug_assert_eq!(numel(&shape), values.len());
        self.check_finite(op, &values);
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|&i| nodes[i].needs_grad);
        let backward: Option<BackwardFn<S>> = if needs_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node { shape, value: Rc::new(values), needs_grad, backward });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn check_finite(&self, op: &'static str, values: &[S]) {
        if self.non_finite.get().is_none() && values.iter().any(|v| !v.is_finite()) {
            self.non_finite.set(Some(op));
        }
    }

    /// Constant input; gradients are never propagated into it.
    pub fn constant(&self, shape: Vec<usize>, values: Vec<S>) -> Var<'_, S> {
        self.push_leaf(shape, values, false)
    }

    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.push_leaf(vec![], vec![v], false)
    }

    /// Differentiable input whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&self, shape: Vec<usize>, values: Vec<S>) -> Var<'_, S> {
        self.push_leaf(shape, values, true)
    }

    /// Binds a tensor into the graph. Repeated calls with the same tensor
    /// return the same node. Tensors with `requires_grad` unset become
    /// constants. The tensor must not move until gradients have been read.
    pub fn param(&self, t: &Tensor<S>) -> Var<'_, S> {
        let key = t as *const Tensor<S> as usize;
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { graph: self, id };
        }
        let v = self.push_leaf(t.shape().to_vec(), t.values().to_vec(), t.requires_grad());
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    pub(crate) fn node_value(&self, id: usize) -> Rc<Vec<S>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn node_shape(&self, id: usize) -> Ref<'_, [usize]> {
        Ref::map(self.nodes.borrow(), |n| n[id].shape.as_slice())
    }

    /// Runs the reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>, NumericsError> {
        assert!(std::ptr::eq(loss.graph, self), "loss belongs to a different graph");
        if self.consumed.replace(true) {
            return Err(NumericsError::GraphConsumed);
        }
        if let Some(op) = self.non_finite.get() {
            return Err(NumericsError::NonFinite { op });
        }
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: loss_node.shape.clone() });
        }
        let needs: Vec<bool> = nodes.iter().map(|n| n.needs_grad).collect();
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![S::one()]);
        for id in (0..=loss.id).rev() {
            let Some(backward) = &nodes[id].backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            {
                let mut sink = GradSink { grads: &mut grads[..id], needs: &needs, lens: &lens };
                backward(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !needs[id] {
                *g = None;
            } else if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads, params: self.params.borrow().clone() })
    }
}

/// Result of a backward pass.
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    params: HashMap<usize, usize>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var<'_, S>) -> Option<&[S]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor bound with [`Graph::param`]; absent when the
    /// tensor was never bound or is disconnected from the loss.
    pub fn of(&self, t: &Tensor<S>) -> Option<&[S]> {
        let key = t as *const Tensor<S> as usize;
        self.params.get(&key).and_then(|&id| self.grads[id].as_deref())
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node_shape(self.id).to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<Vec<S>> {
        self.graph.node_value(self.id)
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.value().as_ref().clone()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> S {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a {}-element node", v.len());
        v[0]
    }

    pub(crate) fn same_graph(&self, other: &Var<'_, S>) {
        assert!(std::ptr::eq(self.graph, other.graph), "operands belong to different graphs");
    }
}
