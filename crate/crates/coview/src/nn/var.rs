//! A minimal reverse-mode autodiff tape over `ndarray`.
//!
//! Each training sample builds a fresh single-threaded graph; parameters
//! enter as leaf variables whose gradients are read back after
//! [`backward`]. Node ids increase monotonically with creation, so sorting
//! reachable nodes by descending id is a valid reverse topological order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, NdFloat};
use num_traits::FromPrimitive;

/// Element type of the tape: `f32` for training, `f64` for oracle checks.
pub trait Elem: NdFloat + FromPrimitive {}
impl Elem for f32 {}
impl Elem for f64 {}

/// Convert an `f64` constant into the tape element type.
pub fn c<F: Elem>(v: f64) -> F {
    F::from_f64(v).expect("constant representable")
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Op<F: Elem> {
    pub parents: Vec<Var<F>>,
    /// Maps the node's output gradient to per-parent contributions
    /// (aligned with `parents`; `None` for parents that need no gradient).
    pub backward: Box<dyn Fn(&ArrayD<F>) -> Vec<Option<ArrayD<F>>>>,
}

pub(crate) struct Inner<F: Elem> {
    id: u64,
    data: ArrayD<F>,
    grad: RefCell<Option<ArrayD<F>>>,
    needs_grad: bool,
    op: Option<Op<F>>,
}

/// A node in the computation graph. Cheap to clone.
pub struct Var<F: Elem>(Rc<Inner<F>>);

impl<F: Elem> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<F: Elem> Var<F> {
    fn fresh(data: ArrayD<F>, needs_grad: bool, op: Option<Op<F>>) -> Self {
        Var(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            data,
            grad: RefCell::new(None),
            needs_grad,
            op,
        }))
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(data: ArrayD<F>) -> Self {
        Var::fresh(data, false, None)
    }

    /// Leaf whose gradient will be accumulated by [`backward`].
    pub fn leaf(data: ArrayD<F>) -> Self {
        Var::fresh(data, true, None)
    }

    pub(crate) fn from_op(data: ArrayD<F>, op: Op<F>) -> Self {
        let needs = op.parents.iter().any(|p| p.0.needs_grad);
        if needs {
            Var::fresh(data, true, Some(op))
        } else {
            // Dead branch for autodiff: drop the closure so the graph stays lean.
            Var::fresh(data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn data(&self) -> &ArrayD<F> {
        &self.0.data
    }

    pub fn shape(&self) -> &[usize] {
        self.0.data.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.0.needs_grad
    }

    /// Take the accumulated gradient out of a leaf, leaving `None`.
    pub fn take_grad(&self) -> Option<ArrayD<F>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn grad_clone(&self) -> Option<ArrayD<F>> {
        self.0.grad.borrow().clone()
    }

    pub fn scalar(&self) -> F {
        debug_assert_eq!(self.0.data.len(), 1, "scalar() on non-scalar var");
        *self.0.data.iter().next().expect("non-empty")
    }

    fn accumulate(&self, contribution: ArrayD<F>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &contribution,
            None => *slot = Some(contribution),
        }
    }
}

/// Run reverse-mode accumulation from a scalar loss. Gradients end up in
/// the `grad` slots of every reachable variable with `needs_grad`.
pub fn backward<F: Elem>(loss: &Var<F>) {
    assert_eq!(loss.data().len(), 1, "backward expects a scalar loss");
    if !loss.0.needs_grad {
        return;
    }

    let mut reachable: HashMap<u64, Var<F>> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(v) = stack.pop() {
        if !v.0.needs_grad || reachable.contains_key(&v.0.id) {
            continue;
        }
        if let Some(op) = &v.0.op {
            for p in &op.parents {
                stack.push(p.clone());
            }
        }
        reachable.insert(v.0.id, v);
    }

    let mut order: Vec<Var<F>> = reachable.into_values().collect();
    order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    loss.accumulate(ArrayD::ones(loss.data().raw_dim()));

    for node in order {
        let Some(op) = &node.0.op else { continue };
        // Intermediate gradients are not needed once consumed.
        let Some(grad_out) = node.0.grad.borrow_mut().take() else { continue };
        let contributions = (op.backward)(&grad_out);
        debug_assert_eq!(contributions.len(), op.parents.len());
        for (parent, contribution) in op.parents.iter().zip(contributions) {
            if let Some(cb) = contribution {
                if parent.0.needs_grad {
                    debug_assert_eq!(cb.shape(), parent.shape(), "gradient shape mismatch");
                    parent.accumulate(cb);
                }
            }
        }
    }
}
