use serde::{Deserialize, Serialize};

use crate::numcore::{stream_id, RngStream};
use crate::par::{self, Execution};
use crate::predictor::{AgentObs, Futures, Observation};
use crate::{Error, Result};

/// Kinematic parameters of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// m/s
    pub speed_mean: f64,
    /// m/s, spread of per-agent preferred speeds
    pub speed_std: f64,
    /// rad/s, spread of per-agent yaw-rate habits
    pub yaw_rate_scale: f64,
    /// m, observation noise on positions
    pub process_noise_std: f64,
    /// 1/s^2, braking gain on the headway shortfall to the leader
    pub interaction_gain: f64,
    /// 1/m, road curvature interval
    pub map_curvature_range: [f64; 2],
}

/// Normal distribution used for one field of a [`DomainFamily`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dist {
    pub mean: f64,
    pub std: f64,
}

impl Dist {
    pub const fn fixed(mean: f64) -> Self {
        Dist { mean, std: 0.0 }
    }

    pub const fn normal(mean: f64, std: f64) -> Self {
        Dist { mean, std }
    }

    fn draw(&self, rng: &mut RngStream) -> f64 {
        if self.std == 0.0 {
            self.mean
        } else {
            rng.gaussian(self.mean, self.std)
        }
    }
}

/// A distribution over [`DomainParams`]; source and target datasets are two
/// families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainFamily {
    pub speed_mean: Dist,
    /// Lower clamp applied to drawn `speed_mean`.
    pub speed_floor: f64,
    pub speed_std: Dist,
    pub yaw_rate_scale: Dist,
    pub process_noise_std: Dist,
    pub interaction_gain: Dist,
    pub curvature_lo: Dist,
    pub curvature_hi: Dist,
}

impl Default for DomainFamily {
    fn default() -> Self {
        DomainFamily::source()
    }
}

impl DomainFamily {
    /// Default source domain: slower and straighter than the target, with
    /// scene-to-scene spread on every axis but process noise.
    pub fn source() -> Self {
        DomainFamily {
            speed_mean: Dist::normal(8.0, 1.0),
            speed_floor: 0.5,
            speed_std: Dist::normal(1.0, 0.4),
            yaw_rate_scale: Dist::normal(0.025, 0.015),
            process_noise_std: Dist::fixed(0.05),
            interaction_gain: Dist::normal(0.35, 0.2),
            curvature_lo: Dist::normal(-0.01, 0.01),
            curvature_hi: Dist::normal(0.01, 0.015),
        }
    }

    /// Default shifted target domain: faster, curvier, more idiosyncratic.
    pub fn target() -> Self {
        DomainFamily {
            speed_mean: Dist::normal(12.0, 1.0),
            speed_floor: 0.5,
            speed_std: Dist::fixed(1.5),
            yaw_rate_scale: Dist::fixed(0.05),
            process_noise_std: Dist::fixed(0.05),
            interaction_gain: Dist::fixed(0.6),
            curvature_lo: Dist::fixed(0.0),
            curvature_hi: Dist::fixed(0.03),
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let fields = [
            ("speed_mean", self.speed_mean),
            ("speed_std", self.speed_std),
            ("yaw_rate_scale", self.yaw_rate_scale),
            ("process_noise_std", self.process_noise_std),
            ("interaction_gain", self.interaction_gain),
            ("curvature_lo", self.curvature_lo),
            ("curvature_hi", self.curvature_hi),
        ];
        for (name, d) in fields {
            if !(d.std >= 0.0) || !d.mean.is_finite() || !d.std.is_finite() {
                return Err(Error::validation(format!("{prefix}.{name}.std"), "must be finite and >= 0"));
            }
        }
        if !(self.speed_floor > 0.0) {
            return Err(Error::validation(format!("{prefix}.speed_floor"), "must be > 0"));
        }
        if self.speed_mean.std == 0.0 && self.speed_mean.mean <= 0.0 {
            return Err(Error::validation(format!("{prefix}.speed_mean.mean"), "must be > 0"));
        }
        Ok(())
    }
}

/// One draw of scene-level parameters from `family`.
pub fn sample_domain_params(family: &DomainFamily, rng: &mut RngStream) -> Result<DomainParams> {
    family.validate("family")?;
    let speed_mean = family.speed_mean.draw(rng).max(family.speed_floor);
    let speed_std = family.speed_std.draw(rng).max(0.0);
    let yaw_rate_scale = family.yaw_rate_scale.draw(rng).max(0.0);
    let process_noise_std = family.process_noise_std.draw(rng).max(0.0);
    let interaction_gain = family.interaction_gain.draw(rng).max(0.0);
    let a = family.curvature_lo.draw(rng);
    let b = family.curvature_hi.draw(rng);
    Ok(DomainParams {
        speed_mean,
        speed_std,
        yaw_rate_scale,
        process_noise_std,
        interaction_gain,
        map_curvature_range: [a.min(b), a.max(b)],
    })
}

/// Past/future horizons in steps, and the step length in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizons {
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
}

impl Horizons {
    /// 2 s observed, 6 s predicted at 0.5 s.
    pub const LONG_TERM: Horizons = Horizons { t_h: 4, t_f: 12, dt: 0.5 };
    /// 1 s observed, 3 s predicted at 0.1 s.
    pub const SHORT_TERM: Horizons = Horizons { t_h: 10, t_f: 30, dt: 0.1 };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneShape {
    pub agents: usize,
    /// Number of online samples `t_s`.
    pub length: usize,
    pub horizons: Horizons,
    /// Shortest admissible `t_s` (see [`crate::scenegen::min_scene_length`]).
    pub min_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub domain: DomainParams,
    pub t_s: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
    pub agent_ids: Vec<u64>,
    /// Observed positions, `tracks[agent][step]`, `t_s + t_f` steps.
    pub tracks: Vec<Vec<[f64; 2]>>,
    /// Map context, `contexts[agent][step]`.
    pub contexts: Vec<Vec<[f64; 4]>>,
}

impl Scene {
    pub fn num_agents(&self) -> usize {
        self.tracks.len()
    }

    /// Earliest sample with a full past window.
    pub fn first_sample(&self) -> usize {
        self.t_h
    }

    /// `(X_t, Y_t)` without any clock check; for offline training only.
    pub fn sample(&self, t: usize) -> Result<(Observation, Futures)> {
        Ok((self.observation_at(t)?, self.future_at(t)?))
    }

    pub(crate) fn observation_at(&self, t: usize) -> Result<Observation> {
        if t < self.t_h || t > self.t_s {
            return Err(Error::usage(format!("sample {t} outside [{}, {}]", self.t_h, self.t_s)));
        }
        let agents = self
            .agent_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| AgentObs {
                id,
                past: self.tracks[i][t - self.t_h..t].to_vec(),
                context: self.contexts[i][t - 1],
            })
            .collect();
        Ok(Observation { t, agents })
    }

    pub(crate) fn future_at(&self, t: usize) -> Result<Futures> {
        if t > self.t_s {
            return Err(Error::usage(format!("label {t} beyond scene length {}", self.t_s)));
        }
        Ok(self.tracks.iter().map(|tr| tr[t..t + self.t_f].to_vec()).collect())
    }
}

/// Smooth reference road with curvature `k0 + k1 sin(2 pi s / L + phi)`.
#[derive(Debug, Clone, Copy)]
struct Road {
    k0: f64,
    k1: f64,
    phase: f64,
}

const ROAD_PERIOD: f64 = 120.0;
const LOOKAHEAD: f64 = 40.0;
const HEADWAY: f64 = 1.5;
const SPEED_RELAX: f64 = 0.5;
const LANE_HALF_WIDTH: f64 = 3.0;

impl Road {
    fn curvature(&self, s: f64) -> f64 {
        self.k0 + self.k1 * (std::f64::consts::TAU * s / ROAD_PERIOD + self.phase).sin()
    }

    /// Heading of the road at arc length `s`, relative to `s = 0`.
    fn heading(&self, s: f64) -> f64 {
        let w = std::f64::consts::TAU / ROAD_PERIOD;
        self.k0 * s + self.k1 / w * (self.phase.cos() - (w * s + self.phase).cos())
    }

    fn pose_at(&self, s: f64) -> ([f64; 2], f64) {
        let steps = (s / 0.25).ceil().max(1.0) as usize;
        let ds = s / steps as f64;
        let mut p = [0.0, 0.0];
        for j in 0..steps {
            let psi = self.heading((j as f64 + 0.5) * ds);
            p[0] += ds * psi.cos();
            p[1] += ds * psi.sin();
        }
        (p, self.heading(s))
    }
}

struct AgentState {
    pos: [f64; 2],
    theta: f64,
    v: f64,
    v_pref: f64,
    habit: f64,
    s: f64,
}

/// Integrate one agent step exactly for constant speed and yaw rate.
fn advance(a: &mut AgentState, omega: f64, dt: f64) {
    let v = a.v;
    if omega.abs() < 1e-12 {
        a.pos[0] += v * dt * a.theta.cos();
        a.pos[1] += v * dt * a.theta.sin();
    } else {
        let th1 = a.theta + omega * dt;
        a.pos[0] += v / omega * (th1.sin() - a.theta.sin());
        a.pos[1] += v / omega * (a.theta.cos() - th1.cos());
        a.theta = th1;
    }
    a.s += v * dt;
}

fn nearest_leader_gap(agents: &[AgentState], i: usize) -> Option<f64> {
    let me = &agents[i];
    let (c, s) = (me.theta.cos(), me.theta.sin());
    agents
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .filter_map(|(_, o)| {
            let dx = o.pos[0] - me.pos[0];
            let dy = o.pos[1] - me.pos[1];
            let fwd = c * dx + s * dy;
            let lat = -s * dx + c * dy;
            (fwd > 0.0 && lat.abs() < LANE_HALF_WIDTH).then_some(fwd)
        })
        .min_by(f64::total_cmp)
}

/// Simulate one scene.
pub fn generate_scene(domain: &DomainParams, shape: &SceneShape, scene_id: u64, rng: &mut RngStream) -> Result<Scene> {
    let Horizons { t_h, t_f, dt } = shape.horizons;
    if shape.agents == 0 {
        return Err(Error::config("a scene needs at least one agent"));
    }
    let floor = shape.min_length.max(t_h + 1);
    if shape.length < floor {
        return Err(Error::config(format!("scene length {} below the minimum {floor}", shape.length)));
    }
    let [lo, hi] = domain.map_curvature_range;
    let road = Road {
        k0: rng.uniform_range(lo, hi),
        k1: rng.uniform_range(0.0, (hi - lo) / 2.0),
        phase: rng.uniform_range(0.0, std::f64::consts::TAU),
    };
    let v_cap = 3.0 * domain.speed_mean;
    let mut s0 = 0.0;
    let mut agents: Vec<AgentState> = (0..shape.agents)
        .map(|i| {
            if i > 0 {
                s0 += rng.uniform_range(15.0, 35.0);
            }
            let (pos, theta) = road.pose_at(s0);
            let v_pref = (domain.speed_mean + domain.speed_std * rng.normal()).clamp(0.5, v_cap);
            AgentState {
                pos,
                theta,
                v: v_pref,
                v_pref,
                habit: domain.yaw_rate_scale * rng.normal(),
                s: s0,
            }
        })
        .collect();

    let steps = shape.length + t_f;
    let n = shape.agents;
    let mut tracks = vec![Vec::with_capacity(steps); n];
    let mut contexts = vec![Vec::with_capacity(steps); n];
    let noise_cap = 4.0 * domain.process_noise_std;
    for _ in 0..steps {
        for (i, a) in agents.iter().enumerate() {
            let mut obs = a.pos;
            if domain.process_noise_std > 0.0 {
                for c in obs.iter_mut() {
                    *c += (domain.process_noise_std * rng.normal()).clamp(-noise_cap, noise_cap);
                }
            }
            tracks[i].push(obs);
            let turn = road.heading(a.s + LOOKAHEAD) - road.heading(a.s);
            contexts[i].push([
                turn.sin(),
                turn.cos(),
                100.0 * road.curvature(a.s),
                (a.s / ROAD_PERIOD).fract(),
            ]);
        }
        let gaps: Vec<Option<f64>> = (0..n).map(|i| nearest_leader_gap(&agents, i)).collect();
        for (a, gap) in agents.iter_mut().zip(gaps) {
            let mut accel = SPEED_RELAX * (a.v_pref - a.v);
            if let Some(g) = gap {
                accel += domain.interaction_gain * (g - HEADWAY * a.v).min(0.0);
            }
            let omega = a.v * road.curvature(a.s) + a.habit;
            advance(a, omega, dt);
            a.v = (a.v + accel * dt).clamp(0.0, v_cap);
        }
    }
    Ok(Scene {
        id: scene_id,
        domain: domain.clone(),
        t_s: shape.length,
        t_h,
        t_f,
        dt,
        agent_ids: (0..n as u64).map(|i| scene_id * 1000 + i).collect(),
        tracks,
        contexts,
    })
}

/// `count` scenes from `family`; scene `i` draws from stream `(seed, namespace:i)`.
pub fn generate_corpus(
    family: &DomainFamily,
    shape: &SceneShape,
    count: usize,
    seed: u64,
    namespace: u32,
    exec: Execution,
) -> Result<Vec<Scene>> {
    family.validate("family")?;
    let idx: Vec<usize> = (0..count).collect();
    par::map(exec, &idx, |_, &i| {
        let mut rng = RngStream::new(seed, stream_id(namespace, i as u64));
        let domain = sample_domain_params(family, &mut rng)?;
        generate_scene(&domain, shape, ((namespace as u64) << 20) + i as u64, &mut rng)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(agents: usize, length: usize) -> SceneShape {
        SceneShape {
            agents,
            length,
            horizons: Horizons::LONG_TERM,
            min_length: 0,
        }
    }

    fn calm(curv: f64) -> DomainParams {
        DomainParams {
            speed_mean: 8.0,
            speed_std: 1.0,
            yaw_rate_scale: 0.0,
            process_noise_std: 0.0,
            interaction_gain: 0.0,
            map_curvature_range: [curv, curv],
        }
    }

    #[test]
    fn degenerate_family_returns_means() {
        let fam = DomainFamily {
            speed_mean: Dist::fixed(9.0),
            speed_std: Dist::fixed(0.5),
            yaw_rate_scale: Dist::fixed(0.1),
            process_noise_std: Dist::fixed(0.2),
            interaction_gain: Dist::fixed(0.4),
            curvature_lo: Dist::fixed(-0.02),
            curvature_hi: Dist::fixed(0.03),
            speed_floor: 0.5,
        };
        let d = sample_domain_params(&fam, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(
            d,
            DomainParams {
                speed_mean: 9.0,
                speed_std: 0.5,
                yaw_rate_scale: 0.1,
                process_noise_std: 0.2,
                interaction_gain: 0.4,
                map_curvature_range: [-0.02, 0.03],
            }
        );
    }

    #[test]
    fn same_rng_same_params() {
        let fam = DomainFamily::source();
        let a = sample_domain_params(&fam, &mut RngStream::new(5, 5)).unwrap();
        let b = sample_domain_params(&fam, &mut RngStream::new(5, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_std_rejected() {
        let mut fam = DomainFamily::source();
        fam.speed_std.std = -1.0;
        assert!(sample_domain_params(&fam, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn speed_mean_monte_carlo() {
        // N(8, 1) clamped at 0.5: the clamp is 7.5 sigma away, so the
        // sample mean of 1000 draws has standard error ~0.032.
        let fam = DomainFamily::source();
        let mut rng = RngStream::new(2024, 0);
        let mean = (0..1000).map(|_| sample_domain_params(&fam, &mut rng).unwrap().speed_mean).sum::<f64>() / 1000.0;
        assert!((mean - 8.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn straight_constant_velocity() {
        let scene = generate_scene(&calm(0.0), &shape(3, 40), 0, &mut RngStream::new(3, 0)).unwrap();
        for tr in &scene.tracks {
            let d0 = [tr[1][0] - tr[0][0], tr[1][1] - tr[0][1]];
            for (k, p) in tr.iter().enumerate() {
                assert!((p[0] - (tr[0][0] + k as f64 * d0[0])).abs() < 1e-9);
                assert!((p[1] - (tr[0][1] + k as f64 * d0[1])).abs() < 1e-9);
            }
        }
    }

    fn circumcenter(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [f64; 2] {
        let d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]));
        let sq = |p: [f64; 2]| p[0] * p[0] + p[1] * p[1];
        [
            (sq(a) * (b[1] - c[1]) + sq(b) * (c[1] - a[1]) + sq(c) * (a[1] - b[1])) / d,
            (sq(a) * (c[0] - b[0]) + sq(b) * (a[0] - c[0]) + sq(c) * (b[0] - a[0])) / d,
        ]
    }

    #[test]
    fn constant_turn_rate_traces_a_circle() {
        // omega = v * kappa, so the radius is v / omega = 1 / kappa.
        let kappa = 0.02;
        let scene = generate_scene(&calm(kappa), &shape(2, 60), 0, &mut RngStream::new(4, 0)).unwrap();
        for tr in &scene.tracks {
            let c = circumcenter(tr[0], tr[5], tr[11]);
            for p in tr {
                let r = (p[0] - c[0]).hypot(p[1] - c[1]);
                assert!((r - 1.0 / kappa).abs() < 1e-6, "r = {r}");
            }
        }
    }

    #[test]
    fn continuity_over_random_scenes() {
        for fam in [DomainFamily::source(), DomainFamily::target()] {
            let scenes = generate_corpus(&fam, &shape(4, 100), 50, 9, 1, Execution::Sequential).unwrap();
            for s in &scenes {
                let bound = s.domain.speed_mean * s.dt * 5.0;
                for tr in &s.tracks {
                    assert_eq!(tr.len(), s.t_s + s.t_f);
                    for w in tr.windows(2) {
                        let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
                        assert!(d.is_finite() && d <= bound, "{d} > {bound}");
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_is_deterministic_and_exec_independent() {
        let a = generate_corpus(&DomainFamily::target(), &shape(3, 30), 6, 77, 2, Execution::Sequential).unwrap();
        let b = generate_corpus(&DomainFamily::target(), &shape(3, 30), 6, 77, 2, Execution::Parallel).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn too_short_scene_is_config_error() {
        let sh = SceneShape {
            min_length: 76,
            ..shape(2, 75)
        };
        assert!(matches!(generate_scene(&calm(0.0), &sh, 0, &mut RngStream::new(0, 0)), Err(Error::Config(_))));
    }
}
