//! Dense n-d tensors with reverse-mode gradient tracking.
//!
//! A tensor is a cheap handle onto a graph node. Operations record their
//! parents and a backward closure; [`backward`] walks the graph once in
//! reverse topological order. Gradients of leaf parameters accumulate across
//! calls until [`Tensor::zero_grad`] resets them; intermediate gradients are
//! rebuilt from scratch on every call.

use super::elem::Elem;
use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Runs `f` without recording any graph; operations inside produce plain
/// values even when their inputs are tracked parameters.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let previous = NO_GRAD.with(|flag| flag.replace(true));
    let result = f();
    NO_GRAD.with(|flag| flag.set(previous));
    result
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|flag| !flag.get())
}

type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Option<Vec<E>>>>;

struct OpRecord<E: Elem> {
    parents: Vec<Tensor<E>>,
    backward: BackwardFn<E>,
}

struct Inner<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    op: Option<OpRecord<E>>,
}

pub struct Tensor<E: Elem> {
    inner: Rc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    fn build(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        op: Option<OpRecord<E>>,
    ) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length must equal the shape product"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                op,
            }),
        }
    }

    /// Untracked value.
    pub fn constant(shape: Vec<usize>, data: Vec<E>) -> Self {
        Self::build(shape, data, false, None)
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn param(shape: Vec<usize>, data: Vec<E>) -> Self {
        Self::build(shape, data, true, None)
    }

    pub fn scalar(v: E) -> Self {
        Self::constant(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::constant(shape, vec![E::ZERO; n])
    }

    /// Result of an operation. When no parent is tracked the graph record is
    /// dropped so inference builds no tape.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        parents: Vec<Tensor<E>>,
        backward: impl Fn(&[E]) -> Vec<Option<Vec<E>>> + 'static,
    ) -> Self {
        #[cfg(debug_assertions)]
        {
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                panic!(
                    "op '{name}' produced a non-finite value at index {i} (shape {shape:?})"
                );
            }
        }
        let _ = name;
        let tracked = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        if tracked {
            Self::build(
                shape,
                data,
                true,
                Some(OpRecord {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Leaf parameter (no producing op, tracked).
    pub fn is_param(&self) -> bool {
        self.inner.requires_grad && self.inner.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.to_f64()).collect()
    }

    /// Scalar readout; panics when the tensor holds more than one value.
    pub fn value(&self) -> E {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "value() requires a scalar tensor");
        d[0]
    }

    /// In-place data replacement for optimizer updates (leaves only).
    pub fn set_data(&self, values: &[E]) {
        assert!(self.is_param() || !self.inner.requires_grad);
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len());
        d.copy_from_slice(values);
    }

    /// Applies `f` to every stored element (leaves only).
    pub fn update_data(&self, f: impl FnMut(&mut E)) {
        assert!(self.is_param() || !self.inner.requires_grad);
        self.inner.data.borrow_mut().iter_mut().for_each(f);
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached copy that shares no graph history.
    pub fn detached(&self) -> Tensor<E> {
        Tensor::constant(self.inner.shape.clone(), self.to_vec())
    }

    pub fn is_all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    fn accumulate_leaf_grad(&self, contribution: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => add_into(g, contribution),
            None => *slot = Some(contribution.to_vec()),
        }
    }
}

fn add_into<E: Elem>(dst: &mut [E], src: &[E]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = E::from_f64(d.to_f64() + s.to_f64());
    }
}

/// Runs reverse-mode differentiation from a scalar loss. Parameter gradients
/// accumulate; call [`Tensor::zero_grad`] between optimizer steps.
pub fn backward<E: Elem>(loss: &Tensor<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::shape(
            "scalar loss",
            format!("{:?}", loss.shape()),
        ));
    }
    if !loss.inner.requires_grad {
        // Loss does not depend on any tracked parameter; nothing to do.
        return Ok(());
    }

    // Post-order DFS; reversed it yields consumers before producers.
    let mut order: Vec<Tensor<E>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((node, child_idx)) = stack.pop() {
        let parents: Vec<Tensor<E>> = node
            .inner
            .op
            .as_ref()
            .map(|op| op.parents.clone())
            .unwrap_or_default();
        if child_idx < parents.len() {
            stack.push((node, child_idx + 1));
            let parent = &parents[child_idx];
            if parent.inner.requires_grad && visited.insert(parent.id()) {
                stack.push((parent.clone(), 0));
            }
        } else {
            order.push(node);
        }
    }

    let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
    grads.insert(loss.id(), vec![E::ONE]);

    for node in order.iter().rev() {
        let Some(grad) = grads.remove(&node.id()) else {
            continue; // no consumer propagated a gradient here
        };
        let Some(op) = node.inner.op.as_ref() else {
            if node.is_param() {
                node.accumulate_leaf_grad(&grad);
            }
            continue;
        };
        let contributions = (op.backward)(&grad);
        debug_assert_eq!(contributions.len(), op.parents.len());
        for (parent, contribution) in op.parents.iter().zip(contributions) {
            let Some(c) = contribution else { continue };
            if !parent.inner.requires_grad {
                continue;
            }
            debug_assert_eq!(c.len(), parent.numel());
            if parent.inner.op.is_none() {
                parent.accumulate_leaf_grad(&c);
            } else {
                match grads.entry(parent.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        add_into(e.get_mut(), &c)
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(c);
                    }
                }
            }
        }
    }
    Ok(())
}
