//! Dense tensors with a reverse-mode gradient tape.
//!
//! The tape is an arena: every op pushes one node holding its output buffer
//! plus whatever the backward pass needs. Node ids increase in creation
//! order, which is already a topological order, so `backward` is a single
//! reverse sweep that touches each node once. Buffers are reference-counted
//! and immutable once recorded; parameters are plain [`Tensor`] values that
//! get (re)registered on a fresh tape each step via [`Tape::watch`].

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Scalar;

mod kernels;
mod ops;

pub(crate) use ops::{kept, Op};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Rc<Vec<S>>,
    pub requires_grad: bool,
    /// Accumulated gradient, same layout as `data`. Filled by the trainer
    /// from a [`Gradients`] store; additive across calls.
    pub grad: Option<Vec<S>>,
    /// Backreference into the tape that produced or watched this tensor.
    node: Option<(u64, usize)>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: vec![data.len()],
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            requires_grad: false,
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![S::zero(); n]),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![v; n]),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: Rc::new(vec![v]),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    /// N(0, std^2) entries drawn from `rng`; marked as a parameter.
    pub fn randn(shape: &[usize], std: S, rng: &mut StreamRng) -> Self {
        let n = shape.iter().product();
        let data: Vec<S> = (0..n).map(|_| rng.normal::<S>() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            requires_grad: true,
            grad: None,
            node: None,
        }
    }

    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::from_vec(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; copy-on-write if a tape still holds the buffer.
    /// Invalidates the node backreference since recorded values no longer
    /// describe this tensor.
    pub fn data_mut(&mut self) -> &mut [S] {
        self.node = None;
        Rc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn add_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.data.len());
        let slot = self.grad.get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (a, &b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn node_on(&self, tape_id: u64) -> Option<usize> {
        match self.node {
            Some((t, id)) if t == tape_id => Some(id),
            _ => None,
        }
    }

    pub(crate) fn share_data(&self) -> Rc<Vec<S>> {
        Rc::clone(&self.data)
    }

    pub(crate) fn made(shape: Vec<usize>, data: Rc<Vec<S>>, requires_grad: bool, node: (u64, usize)) -> Self {
        Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            node: Some(node),
        }
    }
}

pub(crate) struct Node<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Rc<Vec<S>>,
    pub requires_grad: bool,
    pub op: Op<S>,
}

/// Ordered record of operations. Thread-confined; ops take `&self` through a
/// RefCell so forward code composes without threading `&mut` everywhere.
pub struct Tape<S: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register `t` as a leaf. Idempotent within one tape, so a parameter
    /// used in several places keeps a single node and its gradient sums.
    pub fn watch(&self, t: &mut Tensor<S>) {
        if t.node_on(self.id).is_some() {
            return;
        }
        let id = self.push_node(Node {
            shape: t.shape.clone(),
            data: t.share_data(),
            requires_grad: t.requires_grad,
            op: Op::Leaf,
        });
        t.node = Some((self.id, id));
    }

    /// Register a constant (no gradient) by value and return its on-tape handle.
    pub fn constant(&self, mut t: Tensor<S>) -> Tensor<S> {
        t.requires_grad = false;
        self.watch(&mut t);
        t
    }

    pub(crate) fn push_node(&self, node: Node<S>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    pub(crate) fn emit(&self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> Tensor<S> {
        self.emit_shared(shape, Rc::new(data), requires_grad, op)
    }

    pub(crate) fn emit_shared(&self, shape: Vec<usize>, rc: Rc<Vec<S>>, requires_grad: bool, op: Op<S>) -> Tensor<S> {
        let id = self.push_node(Node {
            shape: shape.clone(),
            data: Rc::clone(&rc),
            requires_grad,
            op,
        });
        Tensor::made(shape, rc, requires_grad, (self.id, id))
    }

    pub(crate) fn arg(&self, t: &Tensor<S>) -> Result<usize> {
        t.node_on(self.id).ok_or(Error::OffTape)
    }

    pub fn backward(&self, loss: &Tensor<S>) -> Result<Gradients<S>> {
        let start = self.arg(loss)?;
        if loss.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: loss.shape.clone(),
                rhs: vec![1],
            });
        }
        let mut grads = Gradients::empty(self.id);
        let nodes = self.nodes.borrow();
        grads.slots.resize_with(nodes.len(), || None);
        add_into(&mut grads.slots[start], &[S::one()]);
        for id in (0..=start).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            ops::backprop(&nodes, id, &g, &mut grads.slots);
            grads.slots[id] = Some(g);
        }
        Ok(grads)
    }

    /// Run a fresh backward pass for `loss` and add its gradients into
    /// `grads`, so several scalar losses can share one gradient store.
    pub fn backward_into(&self, loss: &Tensor<S>, grads: &mut Gradients<S>) -> Result<()> {
        if grads.tape != self.id {
            return Err(Error::OffTape);
        }
        let fresh = self.backward(loss)?;
        if grads.slots.len() < fresh.slots.len() {
            grads.slots.resize_with(fresh.slots.len(), || None);
        }
        for (slot, produced) in grads.slots.iter_mut().zip(fresh.slots) {
            if let Some(v) = produced {
                add_into(slot, &v);
            }
        }
        Ok(())
    }
}

pub(crate) fn add_into<S: Scalar>(slot: &mut Option<Vec<S>>, contribution: &[S]) {
    let v = slot.get_or_insert_with(|| vec![S::zero(); contribution.len()]);
    for (a, &b) in v.iter_mut().zip(contribution) {
        *a += b;
    }
}

pub(crate) fn grad_buf<'a, S: Scalar>(slot: &'a mut Option<Vec<S>>, len: usize) -> &'a mut [S] {
    slot.get_or_insert_with(|| vec![S::zero(); len])
}

/// Per-node gradient store produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    tape: u64,
    slots: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    fn empty(tape: u64) -> Self {
        Gradients { tape, slots: Vec::new() }
    }

    /// Gradient w.r.t. `t`, or None if no gradient flowed to it.
    pub fn wrt(&self, t: &Tensor<S>) -> Option<&[S]> {
        let id = t.node_on(self.tape)?;
        self.slots.get(id)?.as_deref()
    }
}
