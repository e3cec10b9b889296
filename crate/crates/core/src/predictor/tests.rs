use super::model::argmin;
use super::*;
use crate::numcore::{finite_diff_check, FdOptions, Objective, RngStream};
use crate::Error;

const T_H: usize = 4;
const T_F: usize = 12;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        emb_dim: 8,
        hidden_dim: 10,
        k_modes: 3,
        ..ModelConfig::default()
    }
}

fn model(seed: u64) -> ModelParams {
    ModelParams::init(&small_cfg(), T_H, T_F, &mut RngStream::new(seed, 0)).unwrap()
}

fn agent(rng: &mut RngStream, id: u64) -> (AgentObs, Vec<[f64; 2]>) {
    let origin = [rng.uniform_range(-50.0, 50.0), rng.uniform_range(-50.0, 50.0)];
    let heading = rng.uniform_range(0.0, std::f64::consts::TAU);
    let v = rng.uniform_range(2.0, 6.0);
    let turn = rng.uniform_range(-0.1, 0.1);
    let pts: Vec<[f64; 2]> = (0..T_H + T_F)
        .map(|k| {
            let th = heading + turn * k as f64;
            let d = v * k as f64;
            [origin[0] + d * th.cos() + 0.1 * rng.normal(), origin[1] + d * th.sin() + 0.1 * rng.normal()]
        })
        .collect();
    let context = [rng.normal(), rng.normal(), rng.normal(), rng.uniform()];
    (
        AgentObs {
            id,
            past: pts[..T_H].to_vec(),
            context,
        },
        pts[T_H..].to_vec(),
    )
}

fn sample(seed: u64, n: usize) -> (Observation, Futures) {
    let mut rng = RngStream::new(seed, 99);
    let (agents, fut) = (0..n).map(|i| agent(&mut rng, 100 + i as u64)).unzip();
    (Observation { t: T_H, agents }, fut)
}

fn randomize_tokens(m: &mut ModelParams, ids: &[u64], seed: u64) {
    m.ensure_tokens(ids);
    let mut rng = RngStream::new(seed, 7);
    for &id in ids {
        m.token_mut(id).unwrap().iter_mut().for_each(|v| *v = 0.3 * rng.normal());
    }
}

#[test]
fn tokens_ignored_outside_ttt() {
    let (obs, fut) = sample(1, 3);
    let plain = embed_inputs(&model(1), &obs, Some(&fut), false).unwrap();
    let mut m = model(1);
    randomize_tokens(&mut m, &obs.ids(), 2);
    assert_eq!(embed_inputs(&m, &obs, Some(&fut), false).unwrap(), plain);
    assert_eq!(forward_predict(&m, &obs, false).unwrap(), forward_predict(&model(1), &obs, false).unwrap());
}

#[test]
fn zero_token_is_identity() {
    let (obs, fut) = sample(2, 3);
    let mut m = model(3);
    m.ensure_tokens(&obs.ids());
    assert_eq!(embed_inputs(&m, &obs, Some(&fut), true).unwrap(), embed_inputs(&m, &obs, Some(&fut), false).unwrap());
}

#[test]
fn token_is_additive() {
    let (obs, fut) = sample(3, 2);
    let mut m = model(4);
    m.ensure_tokens(&obs.ids());
    let eps = 1e-3;
    m.token_mut(obs.agents[0].id).unwrap()[0] = eps;
    let off = embed_inputs(&m, &obs, Some(&fut), false).unwrap();
    let on = embed_inputs(&m, &obs, Some(&fut), true).unwrap();
    assert_eq!(on.hx[0][0], off.hx[0][0] + eps);
    assert_eq!(on.hy.as_ref().unwrap()[0][0], off.hy.as_ref().unwrap()[0][0] + eps);
    assert_eq!(on.hx[0][1..], off.hx[0][1..]);
    assert_eq!(on.hx[1], off.hx[1]);
    assert_eq!(on.hm, off.hm);
}

#[test]
fn unknown_actor_policy() {
    let (obs, _) = sample(4, 2);
    let mut cfg = small_cfg();
    cfg.unknown_actor = UnknownActorPolicy::Error;
    let m = ModelParams::init(&cfg, T_H, T_F, &mut RngStream::new(0, 0)).unwrap();
    assert!(matches!(forward_predict(&m, &obs, true), Err(Error::Config(_))));
    assert!(forward_predict(&model(0), &obs, true).is_ok());
}

#[test]
fn shapes_singleton_and_empty() {
    let m = model(5);
    let (obs, _) = sample(5, 1);
    let p = forward_predict(&m, &obs, false).unwrap();
    assert_eq!(p.trajectories.len(), 1);
    assert_eq!(p.trajectories[0].len(), 3);
    assert!(p.trajectories[0].iter().all(|mode| mode.len() == T_F));
    assert!(p.is_finite());
    let empty = Observation { t: 0, agents: vec![] };
    assert_eq!(forward_predict(&m, &empty, false).unwrap().num_agents(), 0);
}

#[test]
fn malformed_horizon_is_config_error() {
    let (mut obs, fut) = sample(6, 2);
    obs.agents[1].past.pop();
    assert!(matches!(forward_predict(&model(1), &obs, false), Err(Error::Config(_))));
    let (obs, mut fut2) = (sample(6, 2).0, fut);
    fut2[0].pop();
    assert!(matches!(
        loss_mae(&model(1), &obs, &fut2, false, &mut RngStream::new(0, 0)),
        Err(Error::Config(_))
    ));
}

#[test]
fn duplicated_agents_predict_identically() {
    let (mut obs, _) = sample(7, 2);
    let dup = obs.agents[0].clone();
    obs.agents.push(dup);
    let p = forward_predict(&model(2), &obs, false).unwrap();
    assert_eq!(p.trajectories[0], p.trajectories[2]);
}

#[test]
fn forward_is_deterministic() {
    let (obs, _) = sample(8, 4);
    assert_eq!(forward_predict(&model(9), &obs, false).unwrap(), forward_predict(&model(9), &obs, false).unwrap());
}

fn offset(y: &[[f64; 2]], d: [f64; 2]) -> Vec<[f64; 2]> {
    y.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect()
}

#[test]
fn wta_hand_cases() {
    let y: Vec<[f64; 2]> = (0..5).map(|k| [k as f64, 0.5 * k as f64]).collect();
    let pred = Prediction {
        trajectories: vec![vec![offset(&y, [0.0, 3.0]), offset(&y, [0.6, 0.8])]],
    };
    let (l, best) = loss_reg(&pred, &vec![y.clone()]).unwrap();
    assert!((l - 1.0).abs() < 1e-12);
    assert_eq!(best, vec![1]);

    let exact = Prediction {
        trajectories: vec![vec![offset(&y, [1.0, 0.0]), y.clone()]],
    };
    assert_eq!(loss_reg(&exact, &vec![y.clone()]).unwrap().0, 0.0);

    let tie = Prediction {
        trajectories: vec![vec![offset(&y, [1.0, 0.0]), offset(&y, [2.0, 0.0]), offset(&y, [0.0, 1.0])]],
    };
    assert_eq!(loss_reg(&tie, &vec![y.clone()]).unwrap().1, vec![0]);

    let short = vec![y[..4].to_vec()];
    assert!(matches!(loss_reg(&pred, &short), Err(Error::Config(_))));
}

#[test]
fn wta_matches_enumeration() {
    let mut rng = RngStream::new(10, 0);
    for _ in 0..200 {
        let n = 1 + rng.below(4);
        let k = 1 + rng.below(6);
        let y: Futures = (0..n).map(|_| (0..T_F).map(|_| [rng.normal(), rng.normal()]).collect()).collect();
        let pred = Prediction {
            trajectories: (0..n)
                .map(|_| (0..k).map(|_| (0..T_F).map(|_| [rng.normal(), rng.normal()]).collect()).collect())
                .collect(),
        };
        let (l, best) = loss_reg(&pred, &y).unwrap();
        let mut total = 0.0;
        for i in 0..n {
            let mut lo = f64::INFINITY;
            let mut arg = usize::MAX;
            for m in 0..k {
                let mut s = 0.0;
                for t in 0..T_F {
                    let a = pred.trajectories[i][m][t];
                    s += ((a[0] - y[i][t][0]).powi(2) + (a[1] - y[i][t][1]).powi(2)).sqrt();
                }
                s /= T_F as f64;
                if s < lo {
                    lo = s;
                    arg = m;
                }
            }
            total += lo;
            assert_eq!(best[i], arg);
        }
        assert!((l - total / n as f64).abs() < 1e-12);
    }
}

#[test]
fn argmin_invariant_under_monotone_maps() {
    let mut rng = RngStream::new(11, 0);
    for _ in 0..100 {
        let v: Vec<f64> = (0..6).map(|_| rng.uniform_range(0.0, 5.0)).collect();
        let k = argmin(&v);
        assert_eq!(argmin(&v.iter().map(|x| x.sqrt()).collect::<Vec<_>>()), k);
        assert_eq!(argmin(&v.iter().map(|x| (3.0 * x).exp()).collect::<Vec<_>>()), k);
    }
}

/// Set R to output the normalised local past plus `shift`; R's weights are
/// zeroed so the output is the bias.
fn rig_recon(m: &mut ModelParams, obs: &Observation, shift: [f64; 2]) {
    let a = &obs.agents[0];
    let first = a.past[0];
    let last = a.past[T_H - 1];
    let (dx, dy) = (last[0] - first[0], last[1] - first[1]);
    let n = dx.hypot(dy);
    let (c, s) = (dx / n, dy / n);
    let scale = m.cfg.pos_scale;
    let mut bias = Vec::new();
    for p in &a.past {
        let (qx, qy) = (p[0] - last[0], p[1] - last[1]);
        bias.push((c * qx + s * qy) / scale + shift[0]);
        bias.push((-s * qx + c * qy) / scale + shift[1]);
    }
    let (rw, rb) = (m.slots.r_w, m.slots.r_b);
    m.set.tensor_mut(rw).values_mut().iter_mut().for_each(|v| *v = 0.0);
    m.set.tensor_mut(rb).values_mut().copy_from_slice(&bias);
}

#[test]
fn recon_hand_cases() {
    let (obs, fut) = sample(12, 1);
    let mut m = model(12);
    rig_recon(&mut m, &obs, [0.0, 0.0]);
    let l = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(0, 0)).unwrap();
    assert!(l.breakdown.recon < 1e-24, "{}", l.breakdown.recon);
    rig_recon(&mut m, &obs, [3.0, 4.0]);
    let l = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(0, 0)).unwrap();
    assert!((l.breakdown.recon - 25.0).abs() < 1e-9, "{}", l.breakdown.recon);
}

#[test]
fn mask_rng_reproducible() {
    let (obs, fut) = sample(13, 3);
    let m = model(13);
    let a = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(5, 1)).unwrap().breakdown;
    let b = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(5, 1)).unwrap().breakdown;
    assert_eq!(a, b);
    let c = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(6, 1)).unwrap().breakdown;
    assert_eq!(a.reg, c.reg);
}

#[test]
fn total_is_sum_and_order_free() {
    let (obs, fut) = sample(14, 4);
    let m = model(14);
    let l = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(1, 1)).unwrap().breakdown;
    assert_eq!(l.total, l.reg + l.recon);
    let perm = [2, 0, 3, 1];
    let obs_p = Observation {
        t: obs.t,
        agents: perm.iter().map(|&i| obs.agents[i].clone()).collect(),
    };
    let fut_p: Futures = perm.iter().map(|&i| fut[i].clone()).collect();
    let lp = loss_mae(&m, &obs_p, &fut_p, false, &mut RngStream::new(1, 1)).unwrap().breakdown;
    assert!((lp.total - l.total).abs() < 1e-12);
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(lp.best_mode[j], l.best_mode[i]);
    }
    let pred = forward_predict(&m, &obs, false).unwrap();
    let pred_p = forward_predict(&m, &obs_p, false).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        for (a, b) in pred_p.trajectories[j].iter().flatten().zip(pred.trajectories[i].iter().flatten()) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }
}

/// Independent straight-line recomputation of the forward pass and the
/// regression loss from the raw tensors.
#[test]
fn regression_loss_matches_recomputation() {
    let (obs, fut) = sample(15, 3);
    let m = model(15);
    let t = |name: &str| m.params().tensors().iter().find(|t| t.name() == name).unwrap().values().to_vec();
    let aff = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..b.len()).map(|r| b[r] + (0..x.len()).map(|c| w[r * x.len() + c] * x[c]).sum::<f64>()).collect()
    };
    let s = m.cfg.pos_scale;
    let mut a1s = Vec::new();
    let mut frames = Vec::new();
    for a in &obs.agents {
        let o = a.past[T_H - 1];
        let d = [o[0] - a.past[0][0], o[1] - a.past[0][1]];
        let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let (c, sn) = (d[0] / n, d[1] / n);
        let x: Vec<f64> = a
            .past
            .iter()
            .flat_map(|p| [(c * (p[0] - o[0]) + sn * (p[1] - o[1])) / s, (-sn * (p[0] - o[0]) + c * (p[1] - o[1])) / s])
            .collect();
        let mut u = aff(&t("f_x.weight"), &t("f_x.bias"), &x);
        u.extend(aff(&t("f_m.weight"), &t("f_m.bias"), &a.context));
        a1s.push(aff(&t("enc1.weight"), &t("enc1.bias"), &u).into_iter().map(f64::tanh).collect::<Vec<_>>());
        frames.push((o, c, sn));
    }
    let h = a1s[0].len();
    let g: Vec<f64> = (0..h).map(|j| a1s.iter().map(|a| a[j]).sum::<f64>() / a1s.len() as f64).collect();
    let pooled = aff(&t("pool.weight"), &t("pool.bias"), &g);
    let mut total = 0.0;
    for (i, a1) in a1s.iter().enumerate() {
        let a2: Vec<f64> = aff(&t("enc2.weight"), &t("enc2.bias"), a1)
            .iter()
            .zip(&pooled)
            .map(|(z, q)| (z + q).tanh())
            .collect();
        let (o, c, sn) = frames[i];
        let mut best = f64::INFINITY;
        for k in 0..3 {
            let out = aff(&t(&format!("decoder.{k}.weight")), &t(&format!("decoder.{k}.bias")), &a2);
            let mut dsum = 0.0;
            for st in 0..T_F {
                let (qx, qy) = (out[2 * st], out[2 * st + 1]);
                let w = [o[0] + s * (c * qx - sn * qy), o[1] + s * (sn * qx + c * qy)];
                dsum += ((w[0] - fut[i][st][0]).powi(2) + (w[1] - fut[i][st][1]).powi(2)).sqrt();
            }
            best = best.min(dsum / T_F as f64 / s);
        }
        total += best;
    }
    let oracle = total / obs.agents.len() as f64;
    let l = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(0, 0)).unwrap().breakdown;
    assert!((l.reg - oracle).abs() < 1e-10 * oracle.max(1.0), "{} vs {oracle}", l.reg);
    let (lr, _) = loss_reg(&forward_predict(&m, &obs, false).unwrap(), &fut).unwrap();
    assert!((lr - oracle * s).abs() < 1e-10 * (oracle * s).max(1.0));
}

#[test]
fn backward_needs_forward_cache() {
    let (obs, fut) = sample(16, 2);
    let mut m = model(16);
    let loss = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(0, 0)).unwrap().detach();
    assert!(matches!(backward(&mut m, &loss), Err(Error::Usage(_))));
}

#[test]
fn zero_loss_has_zero_gradient() {
    let (obs, fut) = sample(17, 1);
    let mut m = model(17);
    rig_recon(&mut m, &obs, [0.0, 0.0]);
    // Every head outputs the local ground-truth future through its bias.
    let a = &obs.agents[0];
    let (first, last) = (a.past[0], a.past[T_H - 1]);
    let n = (last[0] - first[0]).hypot(last[1] - first[1]);
    let (c, s) = ((last[0] - first[0]) / n, (last[1] - first[1]) / n);
    let sc = m.cfg.pos_scale;
    let bias: Vec<f64> = fut[0]
        .iter()
        .flat_map(|p| {
            let (qx, qy) = (p[0] - last[0], p[1] - last[1]);
            [(c * qx + s * qy) / sc, (-s * qx + c * qy) / sc]
        })
        .collect();
    for k in 0..3 {
        let (w, b) = (m.slots.head_w(k), m.slots.head_b(k));
        m.set.tensor_mut(w).values_mut().iter_mut().for_each(|v| *v = 0.0);
        m.set.tensor_mut(b).values_mut().copy_from_slice(&bias);
    }
    let loss = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(0, 0)).unwrap();
    assert!(loss.total() < 1e-12, "{:?}", loss.breakdown);
    let g = backward(&mut m, &loss).unwrap();
    for layer in g {
        assert!(layer.iter().all(|v| v.abs() < 1e-9));
    }
}

#[test]
fn token_gradient_zero_outside_ttt() {
    let (obs, fut) = sample(18, 3);
    let mut m = model(18);
    randomize_tokens(&mut m, &obs.ids(), 3);
    let loss = loss_mae(&m, &obs, &fut, false, &mut RngStream::new(0, 0)).unwrap();
    let g = backward(&mut m, &loss).unwrap();
    assert!(g[m.token_layer()].iter().all(|&v| v == 0.0));
    let loss = loss_mae(&m, &obs, &fut, true, &mut RngStream::new(0, 0)).unwrap();
    let g = gradients(&m, &loss).unwrap();
    assert!(g.tensors[m.slots.tokens].iter().any(|&v| v != 0.0));
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let (obs, fut) = sample(100 + seed, 1 + seed as usize);
        let mut m = model(200 + seed);
        randomize_tokens(&mut m, &obs.ids(), seed);
        let mask_token = m.slots.mask;
        m.set.tensor_mut(mask_token).values_mut().copy_from_slice(&[0.3, -0.2]);
        let obj = ModelObjective {
            model: m.clone(),
            obs,
            fut,
            ttt_mode: seed % 2 == 0,
            mask_seed: seed,
        };
        let opts = FdOptions {
            floor: 1e-3,
            ..FdOptions::default()
        };
        let report = finite_diff_check(&obj, m.params(), &opts).unwrap();
        assert!(report.passed() && report.max_rel_err() < 1e-5, "{report:?}");
        // The objective must agree with the forward-only path.
        let v = obj.value(m.params()).unwrap();
        assert_eq!(v, obj.value_and_grad(m.params()).unwrap().0);
    }
}

