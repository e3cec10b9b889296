use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::Scene;
use crate::predictor::{Futures, Observation};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Observation,
    Label,
}

/// One traced accessor call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub kind: AccessKind,
    pub t: usize,
    pub clock: usize,
    pub violation: bool,
}

/// Clocked view of a scene. `X_t` is readable once the clock reaches `t`,
/// `Y_t` once it reaches `t + t_f`.
#[derive(Debug)]
pub struct OnlineSequence {
    scene: Arc<Scene>,
    clock: Cell<usize>,
    trace: RefCell<Option<Vec<Access>>>,
}

pub fn build_online_sequence(scene: Arc<Scene>, t_h: usize, t_f: usize) -> Result<OnlineSequence> {
    if scene.t_h != t_h || scene.t_f != t_f {
        return Err(Error::config(format!(
            "scene {} was generated with t_h={}, t_f={}, not {t_h}, {t_f}",
            scene.id, scene.t_h, scene.t_f
        )));
    }
    if scene.t_s < t_h {
        return Err(Error::config(format!("scene {} shorter than one past window", scene.id)));
    }
    Ok(OnlineSequence::new(scene))
}

impl OnlineSequence {
    pub fn new(scene: Arc<Scene>) -> Self {
        OnlineSequence {
            clock: Cell::new(scene.t_h),
            scene,
            trace: RefCell::new(None),
        }
    }

    #[cfg(test)]
    pub(crate) fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn scene_id(&self) -> u64 {
        self.scene.id
    }

    pub fn agent_ids(&self) -> &[u64] {
        &self.scene.agent_ids
    }

    pub fn t_h(&self) -> usize {
        self.scene.t_h
    }

    pub fn t_f(&self) -> usize {
        self.scene.t_f
    }

    /// Index of the last sample, `t_s`.
    pub fn last_sample(&self) -> usize {
        self.scene.t_s
    }

    pub fn clock(&self) -> usize {
        self.clock.get()
    }

    /// Move the clock; it may run up to `t_s + t_f` to drain labels.
    pub fn set_clock(&self, t: usize) {
        self.clock.set(t);
    }

    pub fn enable_tracing(&self) {
        let mut tr = self.trace.borrow_mut();
        if tr.is_none() {
            *tr = Some(Vec::new());
        }
    }

    pub fn tracing_enabled(&self) -> bool {
        self.trace.borrow().is_some()
    }

    /// Take the recorded trace, leaving tracing enabled with an empty log.
    pub fn take_trace(&self) -> Option<Vec<Access>> {
        self.trace.borrow_mut().as_mut().map(std::mem::take)
    }

    fn record(&self, kind: AccessKind, t: usize, violation: bool) {
        if let Some(tr) = self.trace.borrow_mut().as_mut() {
            tr.push(Access {
                kind,
                t,
                clock: self.clock.get(),
                violation,
            });
        }
    }

    /// `X_t`: the `t_h` positions before `t` and the latest map context.
    pub fn observation(&self, t: usize) -> Result<Observation> {
        let clock = self.clock.get();
        if t > clock {
            self.record(AccessKind::Observation, t, true);
            return Err(Error::FutureObservation { t, clock });
        }
        let obs = self.scene.observation_at(t)?;
        self.record(AccessKind::Observation, t, false);
        Ok(obs)
    }

    /// `Y_t`, positions `[t, t + t_f)`.
    pub fn label(&self, t: usize) -> Result<Futures> {
        let clock = self.clock.get();
        let matures = t + self.scene.t_f;
        if clock < matures {
            self.record(AccessKind::Label, t, true);
            return Err(Error::Maturation { t, matures, clock });
        }
        let y = self.scene.future_at(t)?;
        self.record(AccessKind::Label, t, false);
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;
    use crate::scenegen::{generate_scene, DomainFamily, Horizons, SceneShape};

    fn seq() -> OnlineSequence {
        let mut rng = RngStream::new(11, 0);
        let d = crate::scenegen::sample_domain_params(&DomainFamily::source(), &mut rng).unwrap();
        let shape = SceneShape {
            agents: 3,
            length: 40,
            horizons: Horizons::LONG_TERM,
            min_length: 0,
        };
        let scene = generate_scene(&d, &shape, 5, &mut rng).unwrap();
        build_online_sequence(Arc::new(scene), 4, 12).unwrap()
    }

    #[test]
    fn window_ends_at_t() {
        let s = seq();
        s.set_clock(20);
        let obs = s.observation(20).unwrap();
        for (i, a) in obs.agents.iter().enumerate() {
            assert_eq!(a.past.len(), 4);
            assert_eq!(a.past, s.scene().tracks[i][16..20].to_vec());
            assert_eq!(a.id, s.scene().agent_ids[i]);
        }
    }

    #[test]
    fn label_is_track_slice() {
        let s = seq();
        s.set_clock(22);
        let y = s.label(10).unwrap();
        for (i, f) in y.iter().enumerate() {
            assert_eq!(f, &s.scene().tracks[i][10..22].to_vec());
        }
    }

    #[test]
    fn immature_label_refused_and_traced() {
        let s = seq();
        s.enable_tracing();
        s.set_clock(10 + 12 - 1);
        assert!(matches!(s.label(10), Err(Error::Maturation { t: 10, matures: 22, clock: 21 })));
        s.set_clock(8);
        assert!(matches!(s.observation(9), Err(Error::FutureObservation { .. })));
        let tr = s.take_trace().unwrap();
        assert_eq!(tr.iter().filter(|a| a.violation).count(), 2);
    }

    #[test]
    fn mismatched_horizons_rejected() {
        let s = seq();
        assert!(build_online_sequence(Arc::clone(&s.scene), 10, 30).is_err());
    }
}
