//! Multi-modal trajectory predictor with a masked-reconstruction branch.
//!
//! Architecture, per agent (all vectors in an agent-centric frame scaled by
//! `pos_scale`):
//!
//! ```text
//! h_x = f_x(past) [+ a_n]      h_m = f_m(context)      h_y = f_y(future) [+ a_n]
//! e1  = tanh(E1 [h_x; h_m])
//! e2  = tanh(E2 e1 + P mean_j(e1_j))            (neighbour pooling)
//! y_k = D_k e2                                  (K mode heads)
//! r   = R [e2(masked past); h_y]                (reconstruction head)
//! ```
//!
//! The joint objective is the winner-takes-all displacement loss plus the
//! masked-point reconstruction loss. Gradients are written by hand.

mod model;
mod params;

pub use model::{
    backward, embed_inputs, evaluate_mae, forward_predict, gradients, loss_mae, loss_reg, Embedded, MaeLoss,
    MaeLossBreakdown, ModelObjective, Prediction,
};
pub use params::{ModelConfig, ModelParams, UnknownActorPolicy, LAYERS};

use serde::{Deserialize, Serialize};

/// One agent's observed state at a timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentObs {
    pub id: u64,
    /// World-frame positions over the past horizon, oldest first.
    pub past: Vec<[f64; 2]>,
    /// Map context vector.
    pub context: [f64; 4],
}

/// The observation `X_t`: every agent visible at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: usize,
    pub agents: Vec<AgentObs>,
}

impl Observation {
    pub fn ids(&self) -> Vec<u64> {
        self.agents.iter().map(|a| a.id).collect()
    }
}

/// Ground-truth futures `Y_t`, one world-frame track per agent in the
/// order of the matching [`Observation`].
pub type Futures = Vec<Vec<[f64; 2]>>;

#[cfg(test)]
mod tests;
