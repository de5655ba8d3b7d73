//! Minimal differentiable numerical substrate: dense 4-D arrays, the layer
//! set the unfolded network needs (3x3 same-padding convolution, batchnorm,
//! ReLU/sigmoid, global average pooling, dense), reverse-mode differentiation
//! on a tape, Adam, and finite-difference gradient verification.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP};
pub use param::{ParamStore, Parameter};
pub use rng::{derive_seed, rng_for};
pub use scalar::Scalar;
pub use tape::{BatchStats, Tape, Var};
