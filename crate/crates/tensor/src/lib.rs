//! Minimal dense tensors with reverse-mode gradients.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles and
//! replays them backwards in [`Graph::backward`]. Parameters live in a
//! [`ParamStore`] and are bound into a fresh graph for each step, so the
//! graph itself is short-lived and single-writer.
//!
//! Every kernel checks its output for NaN/Inf and fails with
//! [`TensorError::NonFinite`] instead of propagating it.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, GradCheckReport};
pub use graph::{Conv3dSpec, Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

/// Working precision. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Working precision. 64-bit unless the `f32` feature is enabled.
#[cfg(feature = "f32")]
pub type Real = f32;
