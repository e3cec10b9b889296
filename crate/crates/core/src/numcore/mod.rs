//! Deterministic numeric substrate shared by every gradient-bearing module.

mod affine;
pub mod checkpoint;
mod fdcheck;
mod rng;
mod tensor;

pub use affine::{affine_backward, affine_forward, matvec, matvec_backward, AffineCache, AffineGrads};
pub use fdcheck::{check_against, finite_diff_check, relative_error, FdOptions, FdReport, LayerFdResult, Objective};
pub use rng::{sample_stream, stream_id, streams, RngStream};
pub use tensor::{Gradients, LayerRegistry, ParamSet, ParamTensor};
