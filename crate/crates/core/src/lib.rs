//! Numeric core for multimodal (RGB + infrared) small-target detection.
//!
//! Everything in this crate is pure computation over dense tensors: a minimal
//! reverse-mode autodiff tape, the mask-enhanced attention fusion module, a
//! lightweight convolutional detector with an optional training-only
//! reconstruction branch, the composite detection objective, SGD with
//! momentum/Nesterov/weight decay, detection metrics (PR curves, AP, mAP50),
//! and a deterministic synthetic dataset generator.
//!
//! The crate is `no_std`-compatible (`alloc` required); file formats, the
//! CLI, and the training-loop orchestration live in the companion `meafdet`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use scalar::Scalar;
pub use tape::{ActivationKind, ResizeDir, Tape, Var};
pub use tensor::Tensor;
