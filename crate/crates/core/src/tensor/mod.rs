//! Dense N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus shape. Gradients are
//! tracked through a [`Tape`](tape::Tape): leaf tensors are attached to a tape
//! with [`Tensor::tracked`], every op whose inputs are tracked records a
//! backward rule, and [`tape::backward`] replays the tape in reverse,
//! accumulating gradients into the leaves.
//!
//! Element type is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient checking). Ops are single-threaded and deterministic: the same
//! inputs always produce bit-identical outputs.

use std::fmt;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub mod check;
pub mod conv;
mod gemm;
pub mod ops;
pub mod tape;

pub use tape::{backward, Tape};

/// Errors surfaced by tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: invalid configuration: {detail}")]
    Config { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Element dtype tag, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element type: `f32` or `f64`.
///
/// Bundles the float arithmetic the kernels need with a dispatch into the
/// `matrixmultiply` GEMM for the im2col convolution path.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// C = alpha * A·B + beta * C with explicit row/col strides.
    ///
    /// # Safety
    /// Pointers must cover m*k, k*n and m*n elements under the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn to_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Shared storage behind a tensor handle. The value buffer is immutable once
/// produced; the grad slot is the one mutable cell, written during backward.
pub(crate) struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Mutex<Option<Vec<T>>>,
}

impl<T: Scalar> Inner<T> {
    pub(crate) fn accumulate_grad(&self, g: Vec<T>) {
        debug_assert_eq!(g.len(), self.data.len());
        let mut slot = self.grad.lock().unwrap();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g),
        }
    }

    pub(crate) fn take_grad_buf(&self) -> Option<Vec<T>> {
        self.grad.lock().unwrap().take()
    }

    pub(crate) fn data(&self) -> &[T] {
        &self.data
    }
}

impl<T: Scalar> Clone for Inner<T> {
    fn clone(&self) -> Self {
        Inner {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: Mutex::new(self.grad.lock().unwrap().clone()),
        }
    }
}

pub(crate) struct TapeCore<T: Scalar> {
    pub(crate) nodes: Mutex<Vec<tape::Node<T>>>,
    pub(crate) sealed: AtomicBool,
}

/// Dense row-major tensor. Cloning is cheap (shared storage).
pub struct Tensor<T: Scalar = f32> {
    inner: Arc<Inner<T>>,
    tape: Option<Arc<TapeCore<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
            tape: self.tape.clone(),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("tracked", &self.tape.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a shape and a row-major buffer.
    ///
    /// Panics if `data.len()` does not equal the shape's element count;
    /// constructing a tensor with mismatched storage is a programming error.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} needs {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                grad: Mutex::new(None),
            }),
            tape: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel])
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: T) -> Self {
        Tensor::new(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Whether this handle participates in gradient recording.
    pub fn requires_grad(&self) -> bool {
        self.tape.is_some()
    }

    /// Attach this tensor to a tape as a differentiable leaf. The returned
    /// handle shares storage, so gradients accumulated during backward are
    /// visible through `self` as well.
    pub fn tracked(&self, tape: &Tape<T>) -> Tensor<T> {
        Tensor {
            inner: Arc::clone(&self.inner),
            tape: Some(tape.core()),
        }
    }

    /// A handle to the same storage with gradient recording severed.
    pub fn detached(&self) -> Tensor<T> {
        Tensor {
            inner: Arc::clone(&self.inner),
            tape: None,
        }
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Take the accumulated gradient, leaving the slot empty.
    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.inner.take_grad_buf()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Mutate the underlying data in place (optimizer updates). Clones the
    /// storage first if other handles still share it.
    pub fn update_data(&mut self, f: impl FnOnce(&mut [T])) {
        let inner = Arc::make_mut(&mut self.inner);
        f(&mut inner.data);
    }

    /// Cast elementwise through f64 into another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::from_f64(v.as_f64())).collect();
        Tensor::new(self.shape().to_vec(), data)
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn inner_arc(&self) -> Arc<Inner<T>> {
        Arc::clone(&self.inner)
    }

    pub(crate) fn tape_core(&self) -> Option<Arc<TapeCore<T>>> {
        self.tape.clone()
    }

    /// Internal constructor for op results: marks the output tracked when a
    /// tape is supplied and (in debug builds) verifies the data is finite.
    pub(crate) fn op_result(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        tape: Option<Arc<TapeCore<T>>>,
    ) -> Tensor<T> {
        let mut t = Tensor::new(shape, data);
        debug_assert!(t.all_finite(), "{op}: non-finite value in op output");
        let _ = op;
        t.tape = tape;
        t
    }
}

/// Saved reference to an op input: keeps the forward value alive for the
/// backward rule and remembers whether gradient should flow into it.
pub(crate) struct Saved<T: Scalar> {
    inner: Arc<Inner<T>>,
    tracked: bool,
}

impl<T: Scalar> Saved<T> {
    pub(crate) fn data(&self) -> &[T] {
        self.inner.data()
    }

    /// Accumulate gradient if this input was tracked; drop it otherwise.
    pub(crate) fn acc(&self, g: Vec<T>) {
        if self.tracked {
            self.inner.accumulate_grad(g);
        }
    }

    pub(crate) fn is_tracked(&self) -> bool {
        self.tracked
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn saved(&self) -> Saved<T> {
        Saved {
            inner: Arc::clone(&self.inner),
            tracked: self.tape.is_some(),
        }
    }
}

/// The tape shared by a set of op inputs: the first tracked input's tape.
/// All tracked inputs of one op must live on the same tape.
pub(crate) fn tape_of<T: Scalar>(inputs: &[&Tensor<T>]) -> Option<Arc<TapeCore<T>>> {
    let mut found: Option<Arc<TapeCore<T>>> = None;
    for t in inputs {
        if let Some(core) = &t.tape {
            match &found {
                None => found = Some(Arc::clone(core)),
                Some(prev) => debug_assert!(
                    Arc::ptr_eq(prev, core),
                    "op inputs recorded on different tapes"
                ),
            }
        }
    }
    found
}
