//! Mixture-of-low-rank-experts multi-task decoder toolkit.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`shape`], [`kernels`]: dense rank-4 tensors and the
//!   precision-generic forward kernels.
//! - [`tape`], [`ops`], [`losses`], [`gradcheck`]: reverse-mode autodiff
//!   with finite-difference verification.
//! - [`layers`], [`router`], [`decoder`]: the multi-task decoder built from
//!   a generic convolution path, gated shared low-rank experts, and
//!   per-task low-rank experts.
//! - [`reparam`]: inference-time folding of all branches into one
//!   convolution per task, plus the equivalence verifier.
//! - [`accounting`]: parameter/FLOP counting against a full-rank
//!   mixture-of-experts reference.
//! - [`toybench`]: a deterministic synthetic multi-task benchmark (data,
//!   backbone, training loop, metrics, activation exports).
//! - [`config`], [`checkpoint`]: serialized model configuration and
//!   weights.

pub mod accounting;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod ops;
pub mod reparam;
pub mod rng;
pub mod router;
pub mod shape;
pub mod tape;
pub mod tensor;
pub mod toybench;

pub use error::{Error, Result};
pub use shape::Shape4;
pub use tape::{Param, ParamRef, Tape, Value};
pub use tensor::Tensor4;
