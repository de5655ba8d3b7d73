//! Infrared small-target detection via a deep-unfolded low-rank + sparse
//! decomposition network, together with a classical proximal solver
//! baseline, synthetic scene generation, the composite training loss with a
//! full evaluation suite, and a training/evaluation harness.
//!
//! The crate is organized around five subsystems:
//!
//! - [`nn`]: a minimal differentiable substrate (4-D arrays, conv/batchnorm/
//!   activation/pooling/dense layers, reverse-mode tape, Adam, gradient
//!   checking);
//! - [`model`]: the K-stage unfolded network with squeeze-and-excitation
//!   attention in each of its four per-stage modules;
//! - [`rpca`]: proximal operators and a stable low-rank + sparse + noise
//!   solver used as baseline and oracle;
//! - [`scene`]: synthetic scene generation, noise protocols, dataset I/O;
//! - [`metrics`] and [`harness`]: the loss, the evaluation suite, and run
//!   orchestration (training, sweeps, dumps, checkpoints).
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rpca;
pub mod scene;

pub use error::{Error, Result};
