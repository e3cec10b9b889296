use super::params::{ModelParams, UnknownActorPolicy, CONTEXT_DIM};
use super::{Futures, Observation};
use crate::numcore::{matvec, matvec_backward, Gradients, RngStream};
use crate::{Error, Result};

/// Agent-centric frame: origin at the last observed point, x-axis along the
/// displacement across the past window.
#[derive(Debug, Clone, Copy)]
struct Frame {
    origin: [f64; 2],
    c: f64,
    s: f64,
}

impl Frame {
    fn of(past: &[[f64; 2]]) -> Frame {
        let first = past[0];
        let last = past[past.len() - 1];
        let (dx, dy) = (last[0] - first[0], last[1] - first[1]);
        let n = dx.hypot(dy);
        let (c, s) = if n < 1e-9 { (1.0, 0.0) } else { (dx / n, dy / n) };
        Frame { origin: last, c, s }
    }

    fn to_local(&self, p: [f64; 2], scale: f64) -> [f64; 2] {
        let dx = p[0] - self.origin[0];
        let dy = p[1] - self.origin[1];
        [(self.c * dx + self.s * dy) / scale, (-self.s * dx + self.c * dy) / scale]
    }

    fn to_world(&self, q: [f64; 2], scale: f64) -> [f64; 2] {
        [
            self.origin[0] + scale * (self.c * q[0] - self.s * q[1]),
            self.origin[1] + scale * (self.s * q[0] + self.c * q[1]),
        ]
    }
}

fn local_track(frame: &Frame, pts: &[[f64; 2]], scale: f64) -> Vec<f64> {
    pts.iter().flat_map(|&p| frame.to_local(p, scale)).collect()
}

/// Activations of one encoder pass over all agents of a sample.
#[derive(Debug, Clone)]
struct Encoded {
    x: Vec<Vec<f64>>,
    masked: Vec<Vec<usize>>,
    ctx: Vec<[f64; CONTEXT_DIM]>,
    tok: Vec<Option<usize>>,
    u: Vec<Vec<f64>>,
    a1: Vec<Vec<f64>>,
    g: Vec<f64>,
    a2: Vec<Vec<f64>>,
}

fn token_rows(p: &ModelParams, obs: &Observation, ttt_mode: bool) -> Result<Vec<Option<usize>>> {
    obs.agents
        .iter()
        .map(|a| {
            if !ttt_mode {
                return Ok(None);
            }
            match (p.token_row(a.id), p.cfg.unknown_actor) {
                (Some(r), _) => Ok(Some(r)),
                (None, UnknownActorPolicy::Zero) => Ok(None),
                (None, UnknownActorPolicy::Error) => Err(Error::config(format!("no actor token for id {}", a.id))),
            }
        })
        .collect()
}

fn embed_x(p: &ModelParams, x: &[f64], tok: Option<usize>) -> Vec<f64> {
    let s = &p.slots;
    let e = p.cfg.emb_dim;
    let mut hx = vec![0.0; e];
    matvec(p.set.tensor(s.fx_w).values(), p.set.tensor(s.fx_b).values(), x, &mut hx);
    if let Some(r) = tok {
        let row = &p.set.tensor(s.tokens).values()[r * e..(r + 1) * e];
        hx.iter_mut().zip(row).for_each(|(h, a)| *h += a);
    }
    hx
}

fn embed_m(p: &ModelParams, ctx: &[f64; CONTEXT_DIM]) -> Vec<f64> {
    let s = &p.slots;
    let mut hm = vec![0.0; p.cfg.emb_dim];
    matvec(p.set.tensor(s.fm_w).values(), p.set.tensor(s.fm_b).values(), ctx, &mut hm);
    hm
}

fn embed_y(p: &ModelParams, y: &[f64], tok: Option<usize>) -> Vec<f64> {
    let s = &p.slots;
    let e = p.cfg.emb_dim;
    let mut hy = vec![0.0; e];
    matvec(p.set.tensor(s.fy_w).values(), p.set.tensor(s.fy_b).values(), y, &mut hy);
    if let Some(r) = tok {
        let row = &p.set.tensor(s.tokens).values()[r * e..(r + 1) * e];
        hy.iter_mut().zip(row).for_each(|(h, a)| *h += a);
    }
    hy
}

fn encode(
    p: &ModelParams,
    x: Vec<Vec<f64>>,
    masked: Vec<Vec<usize>>,
    ctx: Vec<[f64; CONTEXT_DIM]>,
    tok: Vec<Option<usize>>,
) -> Encoded {
    let s = &p.slots;
    let h = p.cfg.hidden_dim;
    let n = x.len();
    let mut u = Vec::with_capacity(n);
    let mut a1 = Vec::with_capacity(n);
    for i in 0..n {
        let mut ui = embed_x(p, &x[i], tok[i]);
        ui.extend(embed_m(p, &ctx[i]));
        let mut z = vec![0.0; h];
        matvec(p.set.tensor(s.e1_w).values(), p.set.tensor(s.e1_b).values(), &ui, &mut z);
        z.iter_mut().for_each(|v| *v = v.tanh());
        u.push(ui);
        a1.push(z);
    }
    let mut g = vec![0.0; h];
    for a in &a1 {
        g.iter_mut().zip(a).for_each(|(gi, ai)| *gi += ai);
    }
    if n > 0 {
        g.iter_mut().for_each(|v| *v /= n as f64);
    }
    let mut pooled = vec![0.0; h];
    matvec(p.set.tensor(s.p_w).values(), p.set.tensor(s.p_b).values(), &g, &mut pooled);
    let a2 = a1
        .iter()
        .map(|a| {
            let mut z = vec![0.0; h];
            matvec(p.set.tensor(s.e2_w).values(), p.set.tensor(s.e2_b).values(), a, &mut z);
            z.iter_mut().zip(&pooled).for_each(|(v, q)| *v = (*v + q).tanh());
            z
        })
        .collect();
    Encoded {
        x,
        masked,
        ctx,
        tok,
        u,
        a1,
        g,
        a2,
    }
}

fn encode_backward(p: &ModelParams, enc: &Encoded, da2: &[Vec<f64>], grads: &mut Gradients) {
    let s = &p.slots;
    let (e, h) = (p.cfg.emb_dim, p.cfg.hidden_dim);
    let n = enc.x.len();
    if n == 0 {
        return;
    }
    let mut da1: Vec<Vec<f64>> = vec![vec![0.0; h]; n];
    let mut dg = vec![0.0; h];
    let (e2_w, p_w) = (p.set.tensor(s.e2_w).values(), p.set.tensor(s.p_w).values());
    for i in 0..n {
        let dz: Vec<f64> = da2[i].iter().zip(&enc.a2[i]).map(|(d, a)| d * (1.0 - a * a)).collect();
        let (gw, gb) = split2(&mut grads.tensors, s.e2_w, s.e2_b);
        matvec_backward(e2_w, &enc.a1[i], &dz, gw, gb, Some(&mut da1[i]));
        let (gw, gb) = split2(&mut grads.tensors, s.p_w, s.p_b);
        matvec_backward(p_w, &enc.g, &dz, gw, gb, Some(&mut dg));
    }
    let inv_n = 1.0 / n as f64;
    let e1_w = p.set.tensor(s.e1_w).values();
    let fx_w = p.set.tensor(s.fx_w).values();
    let fm_w = p.set.tensor(s.fm_w).values();
    for i in 0..n {
        let dz: Vec<f64> = da1[i]
            .iter()
            .zip(&dg)
            .zip(&enc.a1[i])
            .map(|((d, q), a)| (d + q * inv_n) * (1.0 - a * a))
            .collect();
        let mut du = vec![0.0; 2 * e];
        let (gw, gb) = split2(&mut grads.tensors, s.e1_w, s.e1_b);
        matvec_backward(e1_w, &enc.u[i], &dz, gw, gb, Some(&mut du));
        let (dhx, dhm) = du.split_at(e);
        let needs_dx = !enc.masked[i].is_empty();
        let mut dx = vec![0.0; if needs_dx { enc.x[i].len() } else { 0 }];
        let (gw, gb) = split2(&mut grads.tensors, s.fx_w, s.fx_b);
        matvec_backward(fx_w, &enc.x[i], dhx, gw, gb, if needs_dx { Some(&mut dx) } else { None });
        for &pt in &enc.masked[i] {
            let gm = &mut grads.tensors[s.mask];
            gm[0] += dx[2 * pt];
            gm[1] += dx[2 * pt + 1];
        }
        if let Some(r) = enc.tok[i] {
            let gt = &mut grads.tensors[s.tokens][r * e..(r + 1) * e];
            gt.iter_mut().zip(dhx).for_each(|(g, d)| *g += d);
        }
        let (gw, gb) = split2(&mut grads.tensors, s.fm_w, s.fm_b);
        matvec_backward(fm_w, &enc.ctx[i], dhm, gw, gb, None);
    }
}

/// Two distinct mutable buffers (weight, bias) out of the gradient list.
fn split2(t: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(b, a + 1);
    let (lo, hi) = t.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn validate(p: &ModelParams, obs: &Observation, fut: Option<&Futures>) -> Result<()> {
    for a in &obs.agents {
        if a.past.len() != p.t_h {
            return Err(Error::config(format!(
                "agent {} has {} past points, model expects {}",
                a.id,
                a.past.len(),
                p.t_h
            )));
        }
    }
    if let Some(f) = fut {
        if f.len() != obs.agents.len() {
            return Err(Error::config(format!("{} futures for {} agents", f.len(), obs.agents.len())));
        }
        if let Some(bad) = f.iter().find(|t| t.len() != p.t_f) {
            return Err(Error::config(format!("future of length {} but t_f = {}", bad.len(), p.t_f)));
        }
    }
    Ok(())
}

fn heads(p: &ModelParams, a2: &[f64]) -> Vec<Vec<f64>> {
    let s = &p.slots;
    (0..p.cfg.k_modes)
        .map(|k| {
            let mut o = vec![0.0; 2 * p.t_f];
            matvec(p.set.tensor(s.head_w(k)).values(), p.set.tensor(s.head_b(k)).values(), a2, &mut o);
            o
        })
        .collect()
}

/// Embedded features of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub hx: Vec<Vec<f64>>,
    pub hm: Vec<Vec<f64>>,
    pub hy: Option<Vec<Vec<f64>>>,
}

/// `h_x = f_x(X) + a_n`, `h_y = f_y(Y) + a_n` (tokens only in TTT mode) and
/// the map embedding `f_m(M)`.
pub fn embed_inputs(p: &ModelParams, obs: &Observation, fut: Option<&Futures>, ttt_mode: bool) -> Result<Embedded> {
    validate(p, obs, fut)?;
    let tok = token_rows(p, obs, ttt_mode)?;
    let scale = p.cfg.pos_scale;
    let mut out = Embedded {
        hx: Vec::new(),
        hm: Vec::new(),
        hy: fut.map(|_| Vec::new()),
    };
    for (i, a) in obs.agents.iter().enumerate() {
        let frame = Frame::of(&a.past);
        out.hx.push(embed_x(p, &local_track(&frame, &a.past, scale), tok[i]));
        out.hm.push(embed_m(p, &a.context));
        if let (Some(f), Some(hy)) = (fut, out.hy.as_mut()) {
            hy.push(embed_y(p, &local_track(&frame, &f[i], scale), tok[i]));
        }
    }
    Ok(out)
}

/// World-frame multi-modal forecasts, `trajectories[agent][mode][step]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub trajectories: Vec<Vec<Vec<[f64; 2]>>>,
}

impl Prediction {
    pub fn num_agents(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_finite(&self) -> bool {
        self.trajectories.iter().flatten().flatten().all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

pub fn forward_predict(p: &ModelParams, obs: &Observation, ttt_mode: bool) -> Result<Prediction> {
    validate(p, obs, None)?;
    let scale = p.cfg.pos_scale;
    let frames: Vec<Frame> = obs.agents.iter().map(|a| Frame::of(&a.past)).collect();
    let x = obs.agents.iter().zip(&frames).map(|(a, f)| local_track(f, &a.past, scale)).collect();
    let ctx = obs.agents.iter().map(|a| a.context).collect();
    let tok = token_rows(p, obs, ttt_mode)?;
    let n = obs.agents.len();
    let enc = encode(p, x, vec![Vec::new(); n], ctx, tok);
    let trajectories = enc
        .a2
        .iter()
        .zip(&frames)
        .map(|(a2, frame)| {
            heads(p, a2)
                .into_iter()
                .map(|o| o.chunks_exact(2).map(|q| frame.to_world([q[0], q[1]], scale)).collect())
                .collect()
        })
        .collect();
    let pred = Prediction { trajectories };
    if !pred.is_finite() {
        return Err(Error::numeric("non-finite prediction"));
    }
    Ok(pred)
}

fn mean_displacement(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum::<f64>() / a.len() as f64
}

/// Index of the smallest value; ties resolve to the lowest index.
pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = k;
        }
    }
    best
}

/// Winner-takes-all regression loss on world-frame predictions: the mean
/// over agents of the smallest per-mode mean displacement, in meters. The
/// `reg` term of [`loss_mae`] is this value divided by `pos_scale`.
pub fn loss_reg(pred: &Prediction, y: &Futures) -> Result<(f64, Vec<usize>)> {
    if y.len() != pred.num_agents() {
        return Err(Error::config(format!("{} futures for {} agents", y.len(), pred.num_agents())));
    }
    let mut total = 0.0;
    let mut best = Vec::with_capacity(y.len());
    for (modes, truth) in pred.trajectories.iter().zip(y) {
        if modes.iter().any(|m| m.len() != truth.len()) {
            return Err(Error::config("prediction horizon does not match ground truth"));
        }
        let d: Vec<f64> = modes.iter().map(|m| mean_displacement(m, truth)).collect();
        let k = argmin(&d);
        total += d[k];
        best.push(k);
    }
    let n = y.len().max(1) as f64;
    Ok((total / n, best))
}

/// Components of the joint objective.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeLossBreakdown {
    pub reg: f64,
    pub recon: f64,
    pub total: f64,
    pub best_mode: Vec<usize>,
}

#[derive(Debug, Clone)]
struct MaeCache {
    clean: Encoded,
    y: Vec<Vec<f64>>,
    out: Vec<Vec<Vec<f64>>>,
    masked: Encoded,
    x_true: Vec<Vec<f64>>,
    r_in: Vec<Vec<f64>>,
    r_out: Vec<Vec<f64>>,
    n_masked: usize,
}

/// A loss value with (optionally) the activations needed for [`backward`].
#[derive(Debug, Clone)]
pub struct MaeLoss {
    pub breakdown: MaeLossBreakdown,
    cache: Option<Box<MaeCache>>,
}

impl MaeLoss {
    pub fn total(&self) -> f64 {
        self.breakdown.total
    }

    /// Drop the activations, keeping only the numbers.
    pub fn detach(mut self) -> Self {
        self.cache = None;
        self
    }
}

fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Joint objective `reg + recon` on one supervised sample. Both terms live
/// in the model's normalised local frame (meters divided by `pos_scale`):
/// `reg` is the mean point distance of the winning mode, `recon` the mean
/// squared error of masked points.
///
/// `mask_rng` selects `max(1, round(ratio * t_h))` past points per agent to
/// mask; identical rng states give identical masks. One draw from `mask_rng`
/// salts a per-agent stream keyed by actor id, so the masks do not depend on
/// agent order.
pub fn loss_mae(p: &ModelParams, obs: &Observation, fut: &Futures, ttt_mode: bool, mask_rng: &mut RngStream) -> Result<MaeLoss> {
    validate(p, obs, Some(fut))?;
    let scale = p.cfg.pos_scale;
    let (t_h, t_f, hdim) = (p.t_h, p.t_f, p.cfg.hidden_dim);
    let n = obs.agents.len();
    let frames: Vec<Frame> = obs.agents.iter().map(|a| Frame::of(&a.past)).collect();
    let x_true: Vec<Vec<f64>> = obs.agents.iter().zip(&frames).map(|(a, f)| local_track(f, &a.past, scale)).collect();
    let y: Vec<Vec<f64>> = fut.iter().zip(&frames).map(|(t, f)| local_track(f, t, scale)).collect();
    let ctx: Vec<[f64; CONTEXT_DIM]> = obs.agents.iter().map(|a| a.context).collect();
    let tok = token_rows(p, obs, ttt_mode)?;

    let clean = encode(p, x_true.clone(), vec![Vec::new(); n], ctx.clone(), tok.clone());
    let mut out = Vec::with_capacity(n);
    let mut best = Vec::with_capacity(n);
    let mut reg = 0.0;
    for i in 0..n {
        let modes = heads(p, &clean.a2[i]);
        let d: Vec<f64> = modes
            .iter()
            .map(|o| {
                o.chunks_exact(2)
                    .zip(y[i].chunks_exact(2))
                    .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
                    .sum::<f64>()
                    / t_f as f64
            })
            .collect();
        let k = argmin(&d);
        reg += d[k];
        best.push(k);
        out.push(modes);
    }

    let n_mask = ((p.cfg.mask_ratio * t_h as f64).round() as usize).clamp(1, t_h);
    let mask_token = p.set.tensor(p.slots.mask).values().to_vec();
    let mut masks = Vec::with_capacity(n);
    let mut x_masked = x_true.clone();
    let salt = mask_rng.next_u64();
    for (xm, a) in x_masked.iter_mut().zip(&obs.agents) {
        let idx = RngStream::new(salt, a.id).choose_indices(t_h, n_mask);
        for &pt in &idx {
            xm[2 * pt] = mask_token[0];
            xm[2 * pt + 1] = mask_token[1];
        }
        masks.push(idx);
    }
    let masked = encode(p, x_masked, masks, ctx, tok.clone());
    let mut r_in = Vec::with_capacity(n);
    let mut r_out = Vec::with_capacity(n);
    let mut recon = 0.0;
    let mut n_masked = 0;
    let (r_w, r_b) = (p.set.tensor(p.slots.r_w).values(), p.set.tensor(p.slots.r_b).values());
    for i in 0..n {
        let mut ri = masked.a2[i].clone();
        ri.extend(embed_y(p, &y[i], tok[i]));
        let mut ro = vec![0.0; 2 * t_h];
        matvec(r_w, r_b, &ri, &mut ro);
        for &pt in &masked.masked[i] {
            recon += squared_dist(&ro[2 * pt..2 * pt + 2], &x_true[i][2 * pt..2 * pt + 2]);
            n_masked += 1;
        }
        debug_assert_eq!(ri.len(), hdim + p.cfg.emb_dim);
        r_in.push(ri);
        r_out.push(ro);
    }
    let reg = if n > 0 { reg / n as f64 } else { 0.0 };
    let recon = if n_masked > 0 { recon / n_masked as f64 } else { 0.0 };
    let total = reg + recon;
    if !total.is_finite() {
        return Err(Error::numeric(format!("non-finite loss (reg {reg}, recon {recon})")));
    }
    Ok(MaeLoss {
        breakdown: MaeLossBreakdown {
            reg,
            recon,
            total,
            best_mode: best,
        },
        cache: Some(Box::new(MaeCache {
            clean,
            y,
            out,
            masked,
            x_true,
            r_in,
            r_out,
            n_masked,
        })),
    })
}

/// Loss value only; the result cannot be passed to [`backward`].
pub fn evaluate_mae(
    p: &ModelParams,
    obs: &Observation,
    fut: &Futures,
    ttt_mode: bool,
    mask_rng: &mut RngStream,
) -> Result<MaeLossBreakdown> {
    Ok(loss_mae(p, obs, fut, ttt_mode, mask_rng)?.breakdown)
}

/// Analytic gradient of the joint objective recorded in `loss`.
pub fn gradients(p: &ModelParams, loss: &MaeLoss) -> Result<Gradients> {
    let c = loss
        .cache
        .as_deref()
        .ok_or_else(|| Error::usage("backward requires a loss computed with its forward cache"))?;
    let mut grads = Gradients::zeros_like(&p.set);
    let s = &p.slots;
    let (t_h, t_f, hdim, e) = (p.t_h, p.t_f, p.cfg.hidden_dim, p.cfg.emb_dim);
    let n = c.clean.x.len();
    if n == 0 {
        return Ok(grads);
    }
    if c.clean.tok.iter().chain(&c.masked.tok).flatten().any(|&r| (r + 1) * e > grads.tensors[s.tokens].len()) {
        return Err(Error::usage("actor-token table shrank since the forward pass"));
    }

    // Regression: only the winning mode receives gradient.
    let w_reg = 1.0 / (t_f as f64 * n as f64);
    let mut da2 = vec![vec![0.0; hdim]; n];
    for i in 0..n {
        let k = loss.breakdown.best_mode[i];
        let o = &c.out[i][k];
        let mut dout = vec![0.0; 2 * t_f];
        for st in 0..t_f {
            let dx = o[2 * st] - c.y[i][2 * st];
            let dy = o[2 * st + 1] - c.y[i][2 * st + 1];
            let d = dx.hypot(dy);
            if d > 0.0 {
                dout[2 * st] = w_reg * dx / d;
                dout[2 * st + 1] = w_reg * dy / d;
            }
        }
        let (gw, gb) = split2(&mut grads.tensors, s.head_w(k), s.head_b(k));
        matvec_backward(p.set.tensor(s.head_w(k)).values(), &c.clean.a2[i], &dout, gw, gb, Some(&mut da2[i]));
    }
    encode_backward(p, &c.clean, &da2, &mut grads);

    // Reconstruction.
    if c.n_masked > 0 {
        let w_rec = 2.0 / c.n_masked as f64;
        let mut da2m = vec![vec![0.0; hdim]; n];
        let r_w = p.set.tensor(s.r_w).values();
        let fy_w = p.set.tensor(s.fy_w).values();
        for i in 0..n {
            let mut dr = vec![0.0; 2 * t_h];
            for &pt in &c.masked.masked[i] {
                for d in 0..2 {
                    dr[2 * pt + d] = w_rec * (c.r_out[i][2 * pt + d] - c.x_true[i][2 * pt + d]);
                }
            }
            let mut drin = vec![0.0; hdim + e];
            let (gw, gb) = split2(&mut grads.tensors, s.r_w, s.r_b);
            matvec_backward(r_w, &c.r_in[i], &dr, gw, gb, Some(&mut drin));
            let (d_enc, dhy) = drin.split_at(hdim);
            da2m[i].copy_from_slice(d_enc);
            let (gw, gb) = split2(&mut grads.tensors, s.fy_w, s.fy_b);
            matvec_backward(fy_w, &c.y[i], dhy, gw, gb, None);
            if let Some(r) = c.masked.tok[i] {
                let gt = &mut grads.tensors[s.tokens][r * e..(r + 1) * e];
                gt.iter_mut().zip(dhy).for_each(|(g, d)| *g += d);
            }
        }
        encode_backward(p, &c.masked, &da2m, &mut grads);
    }
    Ok(grads)
}

/// Accumulate the gradient of `loss` into the parameters' `grad` buffers
/// and return a per-layer flattened snapshot of it.
pub fn backward(p: &mut ModelParams, loss: &MaeLoss) -> Result<Vec<Vec<f64>>> {
    let g = gradients(p, loss)?;
    p.set.accumulate_grads(&g);
    Ok(g.per_layer(p.set.registry()))
}

/// Joint loss at fixed inputs and a fixed mask seed, as a function of the
/// parameter values; used for finite-difference checks.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    pub model: ModelParams,
    pub obs: Observation,
    pub fut: Futures,
    pub ttt_mode: bool,
    pub mask_seed: u64,
}

impl ModelObjective {
    fn with(&self, set: &crate::numcore::ParamSet) -> ModelParams {
        let mut m = self.model.clone();
        m.set = set.clone();
        m
    }
}

impl crate::numcore::Objective for ModelObjective {
    fn value(&self, params: &crate::numcore::ParamSet) -> Result<f64> {
        let m = self.with(params);
        Ok(loss_mae(&m, &self.obs, &self.fut, self.ttt_mode, &mut RngStream::new(self.mask_seed, 0))?.total())
    }

    fn value_and_grad(&self, params: &crate::numcore::ParamSet) -> Result<(f64, Gradients)> {
        let m = self.with(params);
        let loss = loss_mae(&m, &self.obs, &self.fut, self.ttt_mode, &mut RngStream::new(self.mask_seed, 0))?;
        Ok((loss.total(), gradients(&m, &loss)?))
    }
}
