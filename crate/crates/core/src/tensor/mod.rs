//! Dense tensors with a reverse-mode differentiation tape.
//!
//! A [`Tensor`] is a shape plus contiguous row-major values. Leaves created
//! with [`Tensor::param`] carry a gradient accumulator; everything recorded
//! through a [`Tape`](tape::Tape) can be differentiated with
//! [`Tape::backward`](tape::Tape::backward).

pub mod fd;
mod kernels;
pub mod tape;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{GodeError, Result};
use crate::scalar::Scalar;

/// Dense multi-dimensional array. Values are immutable during forward and
/// backward; only the optimizer writes through [`Tensor::set_data`], and only
/// between tapes.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<S>>>,
    grad: Option<Rc<RefCell<Vec<S>>>>,
    /// (tape id, node index) when this value was produced by a recorded op.
    pub(crate) node: Option<(u64, usize)>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GodeError::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::new(RefCell::new(data)),
            grad: None,
            node: None,
        })
    }

    /// Trainable leaf: carries a same-shape gradient accumulator.
    pub fn param(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let mut t = Self::from_vec(shape, data)?;
        let n = t.numel();
        t.grad = Some(Rc::new(RefCell::new(vec![S::ZERO; n])));
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(RefCell::new(vec![S::ZERO; numel])),
            grad: None,
            node: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(RefCell::new(vec![value; numel])),
            grad: None,
            node: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: Rc::new(RefCell::new(vec![value])),
            grad: None,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Accumulated gradient of a leaf, if any backward has reached it.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.grad.as_ref().map(|g| g.borrow().clone())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = &self.grad {
            for v in g.borrow_mut().iter_mut() {
                *v = S::ZERO;
            }
        }
    }

    /// Overwrite values in place. Panics on length mismatch. Callers must hold
    /// exclusive access (no live tape referencing this tensor).
    pub fn set_data(&self, values: &[S]) {
        let mut d = self.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Apply an update rule to the values in place.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.data.borrow_mut());
    }

    /// Same values, no tape linkage, no gradient accumulator.
    pub fn detach(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            grad: None,
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.borrow().iter().all(|v| v.is_finite())
    }

    pub(crate) fn data_key(&self) -> usize {
        Rc::as_ptr(&self.data) as *const u8 as usize
    }

    pub(crate) fn grad_cell(&self) -> Option<&Rc<RefCell<Vec<S>>>> {
        self.grad.as_ref()
    }

    /// Convert into a different precision (used by checkpoint I/O).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data
            .borrow()
            .iter()
            .map(|v| T::from_f64(v.to_f64()))
            .collect();
        let mut t = Tensor::from_vec(self.shape.clone(), data).expect("shape preserved");
        if self.grad.is_some() {
            let n = t.numel();
            t.grad = Some(Rc::new(RefCell::new(vec![T::ZERO; n])));
        }
        t
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.data.borrow();
        write!(f, "Tensor{:?}", self.shape)?;
        if d.len() <= 8 {
            write!(f, " {:?}", &d[..])
        } else {
            write!(f, " [{} elems]", d.len())
        }
    }
}
