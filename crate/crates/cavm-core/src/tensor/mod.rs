//! Dense row-major tensors with define-by-run reverse-mode autodiff.
//!
//! The computation graph is rebuilt on every forward pass: each op produces
//! a fresh node holding its inputs and a backward closure. Graphs are
//! single-owner and single-threaded during a forward/backward pass.

mod adam;
mod autodiff;
mod conv;
mod elementwise;
mod matmul;
mod reduce;
mod rope;
mod shape_ops;
mod softmax;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use autodiff::{backward, grad_check, gradients};
pub use rope::rope_apply;

use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct BackwardCtx<'a, T: Scalar> {
    pub grad_out: &'a [T],
    pub out: &'a Tensor<T>,
    pub parents: &'a [Tensor<T>],
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
    backward_done: Cell<bool>,
}

/// Shared handle to an immutable tensor value plus its graph edge.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Tensor<T> {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
                backward_done: Cell::new(false),
            }),
        }
    }

    /// New leaf tensor. Errors if the element count does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor::from_parts(shape.to_vec(), vec![T::ZERO; numel(shape)], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: T) -> Tensor<T> {
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)], false, Vec::new(), None)
    }

    pub fn scalar(value: T) -> Tensor<T> {
        Tensor::from_parts(vec![], vec![value], false, Vec::new(), None)
    }

    /// Mark this leaf as a trainable parameter root.
    pub fn requires_grad(self) -> Tensor<T> {
        assert!(self.inner.parents.is_empty(), "requires_grad only applies to leaves");
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: self.inner.data.clone(),
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
                backward_done: Cell::new(false),
            }),
        }
    }

    /// Result of an op: finite-checks the output and wires the graph edge.
    pub(crate) fn op_result(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Tensor<T>> {
        for v in &data {
            if !v.is_finite() {
                return Err(Error::NumericFault { context: op.to_string() });
            }
        }
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        if requires {
            Ok(Tensor::from_parts(shape, data, true, parents, Some(backward)))
        } else {
            Ok(Tensor::from_parts(shape, data, false, Vec::new(), None))
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.parents.is_empty()
    }

    /// Scalar value of a 0-d or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.inner.data[0]
    }

    /// Detached copy: same values, no graph history, not a parameter.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_parts(self.inner.shape.clone(), self.inner.data.clone(), false, Vec::new(), None)
    }

    /// Accumulated gradient of a leaf after `backward`, if any.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.inner
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::from_parts(self.inner.shape.clone(), g.clone(), false, Vec::new(), None))
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::from_parts(
            self.inner.shape.clone(),
            self.inner.data.iter().map(|v| v.to_f64()).collect(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn from_f64_values(shape: &[usize], values: &[f64]) -> Result<Tensor<T>> {
        Tensor::from_vec(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub(crate) fn inner(&self) -> &Inner<T> {
        &self.inner
    }
}

impl<T: Scalar> Inner<T> {
    pub(crate) fn requires(&self) -> bool {
        self.requires_grad
    }
    pub(crate) fn parents(&self) -> &[Tensor<T>] {
        &self.parents
    }
    pub(crate) fn backward_fn(&self) -> Option<&BackwardFn<T>> {
        self.backward.as_ref()
    }
    pub(crate) fn backward_done(&self) -> &Cell<bool> {
        &self.backward_done
    }
    pub(crate) fn grad_cell(&self) -> &RefCell<Option<Vec<T>>> {
        &self.grad
    }
}
