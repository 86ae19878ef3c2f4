//! Reverse-mode tape.
//!
//! Every operation on a [`Var`] appends a node holding the ids of its inputs
//! and a closure that maps the output adjoint to input adjoints. Intermediates
//! needed by that closure are moved into it by value, so a node never aliases
//! caller buffers. Nodes are only ever appended, which keeps the list in
//! topological order; [`Var::backward`] walks it once in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Maps the adjoint of a node's output to the adjoints of its inputs, one
/// entry per input (`None` when that input needs no gradient).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    #[allow(dead_code)]
    op: &'static str,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    requires_grad: bool,
    leaf: bool,
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

/// A recording of differentiable operations. Cheap to clone (shared handle);
/// confined to the thread that created it.
pub struct Tape<T>(Rc<RefCell<TapeInner<T>>>);

impl<T> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self(Rc::clone(&self.0))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Identifier of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

/// A tensor value recorded on a [`Tape`].
pub struct Var<T> {
    tape: Tape<T>,
    id: usize,
    generation: u64,
    requires_grad: bool,
    value: Rc<Tensor<T>>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
            generation: self.generation,
            requires_grad: self.requires_grad,
            value: Rc::clone(&self.value),
        }
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("requires_grad", &self.requires_grad)
            .field("value", &*self.value)
            .finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self(Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), generation: 0 })))
    }

    /// Records a trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.push_leaf(value, true)
    }

    /// Records a constant leaf (never receives a gradient).
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push_leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Variables created before the reset become
    /// detached: using them in `backward` is a usage error.
    pub fn reset(&self) {
        let mut inner = self.0.borrow_mut();
        inner.nodes.clear();
        inner.generation += 1;
    }

    pub fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: "leaf",
            inputs: Vec::new(),
            shape: value.shape().to_vec(),
            requires_grad,
            leaf: true,
            backward: None,
        });
        Var {
            tape: self.clone(),
            id,
            generation: inner.generation,
            requires_grad,
            value: Rc::new(value),
        }
    }
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.value.ndim()
    }

    pub fn id(&self) -> VarId {
        VarId(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    /// The same value as a constant on the same tape.
    pub fn detach(&self) -> Var<T> {
        self.tape.constant((*self.value).clone())
    }

    /// A constant on this variable's tape.
    pub fn constant_like(&self, value: Tensor<T>) -> Var<T> {
        self.tape.constant(value)
    }

    /// The single value of a one-element variable.
    pub fn item(&self) -> T {
        self.value.item()
    }

    /// Records a new node computed from `inputs`.
    ///
    /// `backward` receives the adjoint of `value` and must return one entry
    /// per input, in order. It is dropped without being stored when no input
    /// requires a gradient. This is the extension point for fused kernels
    /// that provide their own adjoint.
    pub fn from_op(
        op: &'static str,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<T>> {
        let Some(first) = inputs.first() else {
            return Err(Error::Usage(format!("operation `{op}` recorded without inputs")));
        };
        for v in inputs {
            if !v.tape.same_as(&first.tape) {
                return Err(Error::Usage(format!("operation `{op}` mixes variables from different tapes")));
            }
            if v.generation != v.tape.0.borrow().generation {
                return Err(Error::Usage(format!("operation `{op}` uses a variable from a reset tape")));
            }
        }
        Ok(first.tape.record(op, inputs, value, backward))
    }

    /// Single-input node; panics on a variable detached by [`Tape::reset`].
    pub(crate) fn unary(
        &self,
        op: &'static str,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<T> {
        assert_eq!(
            self.generation,
            self.tape.0.borrow().generation,
            "operation `{op}` uses a variable from a reset tape"
        );
        self.tape.record(op, &[self], value, move |g| vec![Some(backward(g))])
    }

    /// Reverse sweep from this scalar. Returns the gradient of every
    /// trainable leaf on the tape; leaves the loss does not depend on get
    /// zeros.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.value.numel() != 1 || self.value.ndim() > 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let inner = self.tape.0.borrow();
        if inner.generation != self.generation || self.id >= inner.nodes.len() {
            return Err(Error::Usage("loss is detached from its tape (tape was reset)".into()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=self.id).map(|_| None).collect();
        if self.requires_grad {
            grads[self.id] = Some(Tensor::full(self.shape(), T::one()));
        }
        let mut out = HashMap::new();
        for i in (0..=self.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &inner.nodes[i];
            if node.leaf {
                out.insert(VarId(i), g);
                continue;
            }
            let Some(bw) = &node.backward else { continue };
            let input_grads = bw(&g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !inner.nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), &inner.nodes[input].shape[..], "adjoint shape");
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (i, node) in inner.nodes.iter().enumerate() {
            if node.leaf && node.requires_grad {
                out.entry(VarId(i)).or_insert_with(|| Tensor::zeros(&node.shape));
            }
        }
        Ok(Gradients { map: out, generation: inner.generation })
    }
}

impl<T: Real> Tape<T> {
    fn record(
        &self,
        op: &'static str,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            shape: value.shape().to_vec(),
            requires_grad,
            leaf: false,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
        });
        Var { tape: self.clone(), id, generation: inner.generation, requires_grad, value: Rc::new(value) }
    }
}

/// Result of [`Var::backward`]: gradient per trainable leaf.
pub struct Gradients<T> {
    map: HashMap<VarId, Tensor<T>>,
    generation: u64,
}

impl<T: Real> std::fmt::Debug for Gradients<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut ids: Vec<_> = self.map.keys().map(|k| k.0).collect();
        ids.sort_unstable();
        f.debug_struct("Gradients").field("leaves", &ids).finish()
    }
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`, or `None` if it is not a trainable leaf of the
    /// tape this map was computed on.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        self.map.get(&var.id())
    }

    /// Like [`get`](Self::get) but a missing entry is a usage error.
    pub fn wrt(&self, var: &Var<T>) -> Result<&Tensor<T>> {
        self.get(var).ok_or_else(|| Error::Usage(format!("no gradient recorded for variable {}", var.id)))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, id: VarId) -> bool {
        self.map.contains_key(&id)
    }
}
