//! Implicitly equivariant networks on a small CPU autodiff engine.
//!
//! Standard convolutional networks are trained with an extra loss that
//! compares group-pooled feature maps of an input and its transformed copies,
//! so that equivariance to rotations, reflections or scalings is learned
//! instead of built into the weights.

use std::sync::atomic::{AtomicUsize, Ordering};

pub mod config;
pub mod data;
pub mod equiv;
pub mod error;
pub mod gradcheck;
pub mod group;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use group::{Action, GroupSpec, ValidMask};
pub use model::{build_model, pooled_channel_count, Model, ModelConfig};
pub use nn::{GroupLayout, Mode};
pub use tensor::{DType, Fill, Scalar, Tape, Tensor, Var};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Sets the number of worker threads used by convolution kernels.
///
/// The default of 1 is bit-reproducible. Larger values split each batch
/// across threads and sum weight gradients per chunk, so results depend on
/// the thread count.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}
