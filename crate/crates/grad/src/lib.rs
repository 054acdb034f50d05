//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar with respect to every node that requires one.
//! Trainable tensors live in a [`ParamStore`] and enter a graph as leaves
//! through [`Graph::param`].
//!
//! The element type is generic over [`Real`] so that training runs in `f32`
//! while finite-difference verification runs the same kernels in `f64`.

mod checkpoint;
mod ema;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;
mod optim;
mod params;
mod real;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_VERSION, TABLE_EMA, TABLE_PARAMS};
pub use ema::Ema;
pub use error::{GradError, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig, CosineSchedule};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
