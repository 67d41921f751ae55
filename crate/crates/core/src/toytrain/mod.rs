//! A small differentiable detector trained on synthetic scenes.
//!
//! Everything here runs in `f64` on the CPU: a reverse-mode tape
//! ([`graph`]) over hand-written kernels, a frozen random backbone with a
//! trainable pyramid, context modules and heads ([`model`]), and the training
//! and evaluation loops built on the rest of the crate.

pub mod checkpoint;
pub mod cost;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
