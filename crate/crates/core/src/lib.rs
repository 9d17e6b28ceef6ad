//! Training engine for deep residual bidirectional LSTM sequence classifiers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] — dense `f64` tensors, a tape-based reverse-mode autodiff
//!   engine, the named parameter store, and finite-difference gradient
//!   checking.
//! - [`layers`] — LSTM cells, bidirectional layers, residual blocks with
//!   batch normalisation, dropout, and the full network forward pass.
//! - [`train`] — loss, gradient clipping, Adam, the training loop, grid
//!   search, and binary checkpoints.
//! - [`data`] — dataset loaders (pre-windowed inertial-signal layout and a
//!   generic manifest-driven reader), gap interpolation, normalisation, and
//!   sliding windows.
//! - [`metrics`] — confusion matrices and the derived classification scores.
//!
//! Everything is deterministic given a seed: random state is a seeded
//! [`rand_chacha::ChaCha8Rng`], parameters iterate in sorted path order, and
//! every floating-point reduction has a fixed evaluation order.

pub mod data;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use tensor::{grad_check, GradCheckReport, NodeId, ParamStore, Tape, Tensor, TensorError};
