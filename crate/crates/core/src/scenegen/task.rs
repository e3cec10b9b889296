use std::sync::Arc;

use super::{OnlineSequence, Scene};
use crate::numcore::RngStream;
use crate::predictor::{Futures, Observation};
use crate::{Error, Result};

/// Shortest scene that supports `k_inner` updates plus a scored evaluation.
pub const fn min_scene_length(t_h: usize, t_f: usize, k_inner: usize, tau: usize) -> usize {
    t_h + (k_inner + 1) * tau + t_f
}

/// A simulated test-time run over one scene: updates at clocks
/// `start + tau, ..., start + K tau`, each on the sample that matured `tau`
/// steps earlier, then evaluation on `X_{start + K tau}`.
#[derive(Debug, Clone)]
pub struct TttTask {
    pub scene: Arc<Scene>,
    pub start: usize,
    pub tau: usize,
    /// Offsets from `start`: `tau, 2 tau, ..., K tau`.
    pub schedule: Vec<usize>,
    /// Offset of the evaluation sample, `K tau`.
    pub eval_offset: usize,
}

impl TttTask {
    pub fn new(scene: Arc<Scene>, start: usize, k_inner: usize, tau: usize) -> Result<Self> {
        if tau == 0 {
            return Err(Error::validation("meta.tau", "must be >= 1"));
        }
        let schedule: Vec<usize> = (1..=k_inner).map(|j| j * tau).collect();
        let task = TttTask {
            scene,
            start,
            tau,
            schedule,
            eval_offset: k_inner * tau,
        };
        let last_label = task.start + task.eval_offset;
        if task.start < task.scene.t_h || last_label > task.scene.t_s {
            return Err(Error::config(format!("task on scene {} exceeds its bounds", task.scene.id)));
        }
        Ok(task)
    }

    pub fn k_inner(&self) -> usize {
        self.schedule.len()
    }

    pub fn sequence(&self) -> OnlineSequence {
        OnlineSequence::new(Arc::clone(&self.scene))
    }

    /// Supervision pair for inner step `j`, read at clock `start + schedule[j]`.
    pub fn supervision(&self, seq: &OnlineSequence, j: usize) -> Result<(Observation, Futures)> {
        let clock = self.start + self.schedule[j];
        seq.set_clock(clock);
        let t = clock - self.tau;
        Ok((seq.observation(t)?, seq.label(t)?))
    }

    /// Evaluation pair; the label is read once it has matured.
    pub fn evaluation(&self, seq: &OnlineSequence) -> Result<(Observation, Futures)> {
        let t = self.start + self.eval_offset;
        seq.set_clock(t + self.scene.t_f);
        Ok((seq.observation(t)?, seq.label(t)?))
    }

    /// Sample index of inner step `j` (or of the evaluation for `j == K`).
    pub fn sample_index(&self, j: usize) -> usize {
        if j < self.schedule.len() {
            self.start + self.schedule[j] - self.tau
        } else {
            self.start + self.eval_offset
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSet {
    pub tasks: Vec<TttTask>,
    pub skipped: usize,
}

/// One task per long-enough scene, with a random start offset inside the
/// scene's slack, shuffled.
pub fn make_ttt_task_set(scenes: &[Arc<Scene>], k_inner: usize, tau: usize, rng: &mut RngStream) -> Result<TaskSet> {
    if tau == 0 {
        return Err(Error::validation("meta.tau", "must be >= 1"));
    }
    let mut tasks = Vec::with_capacity(scenes.len());
    let mut skipped = 0;
    for s in scenes {
        let min = min_scene_length(s.t_h, s.t_f, k_inner, tau);
        if s.t_s < min {
            log::warn!("scene {} has length {} < {min}; skipped", s.id, s.t_s);
            skipped += 1;
            continue;
        }
        let slack = s.t_s - min;
        let start = s.t_h + rng.below(slack + 1);
        tasks.push(TttTask::new(Arc::clone(s), start, k_inner, tau)?);
    }
    if skipped > 0 {
        log::warn!("{skipped} of {} scenes too short for K={k_inner}, tau={tau}", scenes.len());
    }
    rng.shuffle(&mut tasks);
    Ok(TaskSet { tasks, skipped })
}
