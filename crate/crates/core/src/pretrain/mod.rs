//! Offline joint pre-training and first-order meta pre-training.

mod meta;
mod offline;

pub use meta::{inner_adapt, mean_adapted_loss, meta_outer_step, meta_pretrain, InnerOutcome, MetaConfig, MetaEpochLog, MetaOutcome, OuterStepReport};
pub use offline::{dataset_loss, offline_pretrain, offline_samples, EpochLog, OfflineConfig, OfflineOutcome};

use crate::numcore::{Gradients, RngStream};
use crate::predictor::{gradients, loss_mae, Futures, MaeLossBreakdown, ModelParams, Observation};
use crate::Result;

/// Loss and gradient of one supervised sample.
pub(crate) fn sample_gradient(
    model: &ModelParams,
    obs: &Observation,
    fut: &Futures,
    ttt_mode: bool,
    mask: &mut RngStream,
) -> Result<(MaeLossBreakdown, Gradients)> {
    let loss = loss_mae(model, obs, fut, ttt_mode, mask)?;
    let g = gradients(model, &loss)?;
    Ok((loss.breakdown, g))
}
