//! Gradient tape: a linear record of executed ops replayed in reverse.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use super::{Inner, Result, Scalar, Tensor, TensorError};

/// One recorded op: the output's storage plus a closure that, given the
/// output gradient, computes and accumulates input gradients.
pub(crate) struct Node<T: Scalar> {
    pub(crate) out: Arc<Inner<T>>,
    pub(crate) back: Box<dyn FnOnce(&[T]) + Send>,
}

/// Owner handle for a recording. Create one per forward pass, attach leaves
/// with [`Tensor::tracked`], then call [`backward`] on the scalar loss.
pub struct Tape<T: Scalar = f32> {
    core: Arc<super::TapeCore<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            core: Arc::new(super::TapeCore {
                nodes: Mutex::new(Vec::new()),
                sealed: AtomicBool::new(false),
            }),
        }
    }

    pub(crate) fn core(&self) -> Arc<super::TapeCore<T>> {
        Arc::clone(&self.core)
    }

    /// Number of ops recorded so far.
    pub fn len(&self) -> usize {
        self.core.nodes.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Scalar> super::TapeCore<T> {
    pub(crate) fn record(self: &Arc<Self>, out: &Tensor<T>, back: impl FnOnce(&[T]) + Send + 'static) {
        assert!(
            !self.sealed.load(Ordering::Relaxed),
            "recording onto a tape that has already been replayed"
        );
        self.nodes.lock().unwrap().push(Node {
            out: out.inner_arc(),
            back: Box::new(back),
        });
    }
}

/// Reverse-replay the tape from `loss`, accumulating gradients into every
/// tracked leaf. Consumes the tape; intermediate gradient buffers are freed
/// as soon as their node has run.
///
/// `loss` must be scalar (one element) and recorded on `tape`.
pub fn backward<T: Scalar>(loss: &Tensor<T>, tape: Tape<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    match loss.tape_core() {
        Some(core) if Arc::ptr_eq(&core, &tape.core) => {}
        _ => {
            return Err(TensorError::Config {
                op: "backward",
                detail: "loss was not recorded on the given tape".into(),
            })
        }
    }

    tape.core.sealed.store(true, Ordering::Relaxed);
    loss.inner_arc().accumulate_grad(vec![T::one()]);

    let nodes = std::mem::take(&mut *tape.core.nodes.lock().unwrap());
    for node in nodes.into_iter().rev() {
        // A node whose output never received gradient contributes nothing.
        if let Some(g) = node.out.take_grad_buf() {
            (node.back)(&g);
        }
    }
    Ok(())
}
