//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with a
//! closure that maps the output gradient onto the operation's inputs. Calling
//! [`Tape::backward`] replays the closures in reverse order.
//!
//! Heavy layers (LSTM, normalisation, framing) are fused into single tape
//! nodes with hand-written backward passes; everything else is composed from
//! the primitive ops in [`ops`].

mod fused;
mod lstm;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub use fused::{frame_count, ChunkLayout};
pub use lstm::LstmWeights;

pub(crate) use fused::SiSdrParts;

/// Dense n-dimensional array in standard (row-major) layout.
pub type Array = ArrayD<f64>;

type Backward = Box<dyn Fn(&Array, &mut Gradients)>;

struct Node {
    value: Rc<Array>,
    backward: Option<Backward>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.insert(value, None, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.insert(value, None, false)
    }

    /// Like [`Tape::leaf`] but shares the caller's buffer.
    pub fn leaf_shared(&self, value: Rc<Array>) -> Var<'_> {
        self.insert_rc(value, None, true)
    }

    pub fn constant_shared(&self, value: Rc<Array>) -> Var<'_> {
        self.insert_rc(value, None, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, value: Array, backward: Option<Backward>, requires_grad: bool) -> Var<'_> {
        self.insert_rc(Rc::new(standard(value)), backward, requires_grad)
    }

    fn insert_rc(&self, value: Rc<Array>, backward: Option<Backward>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records the result of an operation on `parents`. The backward closure
    /// is dropped when no parent needs a gradient.
    pub(crate) fn push<'t, F>(&'t self, value: Array, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Array, &mut Gradients) + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        if requires_grad {
            self.insert(value, Some(Box::new(backward)), true)
        } else {
            self.insert(value, None, false)
        }
    }

    /// Back-propagates from a scalar `root`, seeding its gradient with one.
    ///
    /// Only leaf gradients are retained in the result.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads = Gradients {
            slots: (0..nodes.len()).map(|_| None).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
        };
        let seed = ArrayD::from_elem(nodes[root.id].value.raw_dim(), 1.0);
        grads.accumulate(root.id, seed);
        for id in (0..=root.id).rev() {
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            match &nodes[id].backward {
                Some(bw) => bw(&g, &mut grads),
                None => grads.slots[id] = Some(g),
            }
        }
        grads
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    slots: Vec<Option<Array>>,
    requires: Vec<bool>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.slots.get(var.id).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Array> {
        self.slots.get_mut(var.id).and_then(|s| s.take())
    }

    pub(crate) fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    pub(crate) fn accumulate(&mut self, id: usize, grad: Array) {
        if !self.requires[id] {
            return;
        }
        match &mut self.slots[id] {
            Some(existing) => *existing += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    /// Accumulates a lazily computed gradient, skipping the work when the
    /// target does not need it.
    pub(crate) fn accumulate_with(&mut self, id: usize, grad: impl FnOnce() -> Array) {
        if self.requires[id] {
            self.accumulate(id, grad());
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a zero-dimensional (or single-element) variable.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a variable with {} elements", v.len());
        v.iter().copied().next().unwrap_or_default()
    }
}

/// Copies an array into standard layout if needed.
pub(crate) fn standard(a: Array) -> Array {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Central finite-difference check of `f` at `x` against the tape gradient.
    /// Returns the worst relative error over all coordinates.
    pub fn grad_check<F>(x: &Array, f: F) -> f64
    where
        F: for<'t> Fn(Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let input = tape.leaf(x.clone());
        let out = f(input);
        let analytic = tape.backward(out).get(input).cloned().unwrap_or_else(|| Array::zeros(x.raw_dim()));
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (idx, a) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let t = Tape::new();
                let v = t.constant(xp);
                f(v).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }
}
