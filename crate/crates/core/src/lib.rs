//! Meta pre-training and data-adaptive test-time training for multi-agent
//! trajectory prediction under streaming distribution shift.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: parameter tensors, seeded RNG streams, affine kernels,
//!   finite-difference gradient audits and checkpoints.
//! - [`predictor`]: a small masked-autoencoding multi-modal forecaster with
//!   actor-specific tokens and an analytic backward pass.
//! - [`scenegen`]: synthetic unicycle scenes, online sequences with label
//!   maturation, and simulated adaptation tasks.
//! - [`pretrain`]: offline joint training and first-order meta pre-training.
//! - [`ttt`]: the online update engine (hypergradient learning rates and
//!   hard-sample-driven extra updates).
//! - [`eval`]: streaming best-of-K metrics and the causality auditor.
//! - [`harness`]: experiment configuration, the ablation / sweep matrix and
//!   result persistence used by the `metadat` binary.

pub mod error;
pub mod eval;
pub mod harness;
pub mod numcore;
pub mod optim;
pub mod par;
pub mod predictor;
pub mod pretrain;
pub mod scenegen;
pub mod ttt;

pub use error::{Error, Result};
