//! Minimal dense tensor with reverse-mode automatic differentiation.
//!
//! Row-major `f64` storage, no strided views. Every primitive records
//! itself on an implicit tape (the parent links of the result) whenever an
//! input requires gradients; `Tensor::backward` walks the tape in reverse
//! topological order and accumulates gradients by summation.
//!
//! All primitives fail fast on non-finite outputs, naming the producing
//! operation.

mod ops;
mod tape;

pub use ops::{mul_counter, reset_mul_counter};
pub(crate) use ops::NormScope;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NumericFault { op: &'static str },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("backward called twice on the same loss without rebuilding the tape")]
    BackwardTwice,
    #[error("{op}: index out of bounds: {detail}")]
    OutOfBounds { op: &'static str, detail: String },
    #[error("tensor blob i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor blob parse: {0}")]
    BadBlob(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) is_leaf: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) backward_fn: Option<BackwardFn>,
    pub(crate) backward_done: Cell<bool>,
}

/// Dense N-dimensional array of `f64`, row-major.
///
/// Cloning is cheap (shared reference); the value buffer is immutable for
/// everything except leaf parameters, which an optimizer may overwrite
/// between tape builds via [`Tensor::set_data`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub(crate) fn make(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        is_leaf: bool,
        parents: Vec<Tensor>,
        backward_fn: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                is_leaf,
                grad: RefCell::new(None),
                parents,
                backward_fn,
                backward_done: Cell::new(false),
            }),
        }
    }

    /// Constant tensor (not tracked by the tape).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        Ok(Tensor::make(shape.to_vec(), data, false, true, vec![], None))
    }

    /// Leaf variable participating in differentiation.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "param",
                detail: format!("shape {:?} does not hold {} elements", shape, data.len()),
            });
        }
        Ok(Tensor::make(shape.to_vec(), data, true, true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape.to_vec(), vec![0.0; n], false, true, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::make(vec![1], vec![v], false, true, vec![], None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.is_leaf
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a 0-/1-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(NumericsError::NonScalarLoss {
                numel: self.numel(),
            });
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrite a leaf's values in place (optimizer step). The tensor must
    /// not be part of a live tape that will still be walked.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.numel() {
            return Err(NumericsError::ShapeMismatch {
                op: "set_data",
                detail: format!("expected {} elements, got {}", self.numel(), data.len()),
            });
        }
        self.inner.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
        self.inner.backward_done.set(false);
    }

    /// Reverse-mode differentiation from a scalar loss. Populates `grad` on
    /// every reachable tensor with `requires_grad`.
    pub fn backward(&self) -> Result<()> {
        tape::backward(self)
    }
}

/// Central finite-difference gradient of a scalar function, the independent
/// oracle used by the gradient tests.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(x.shape(), plus)?)?.item()?;
        let fm = f(&Tensor::from_vec(x.shape(), minus)?)?.item()?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Serialize to the flat checkpoint blob: LE u32 rank, LE u32 dims, raw LE
/// f64 payload.
pub fn write_blob(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parse one blob starting at `offset`; returns the tensor and the offset
/// one past its payload.
pub fn read_blob(bytes: &[u8], offset: usize) -> Result<(Tensor, usize)> {
    let take_u32 = |pos: usize| -> Result<u32> {
        let end = pos + 4;
        if end > bytes.len() {
            return Err(NumericsError::BadBlob(format!(
                "truncated header at byte {pos}"
            )));
        }
        Ok(u32::from_le_bytes(bytes[pos..end].try_into().unwrap()))
    };
    let rank = take_u32(offset)? as usize;
    let mut pos = offset + 4;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(take_u32(pos)? as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let end = pos + 8 * n;
    if end > bytes.len() {
        return Err(NumericsError::BadBlob(format!(
            "truncated payload at byte {pos}, need {n} f64 values"
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let b = pos + 8 * i;
        data.push(f64::from_le_bytes(bytes[b..b + 8].try_into().unwrap()));
    }
    Ok((Tensor::from_vec(&shape, data)?, end))
}

pub fn blob_len(shape: &[usize]) -> usize {
    4 + 4 * shape.len() + 8 * shape.iter().product::<usize>()
}

#[cfg(test)]
mod tests;
