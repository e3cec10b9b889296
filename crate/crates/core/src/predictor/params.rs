use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::numcore::{checkpoint, ParamSet, ParamTensor, RngStream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownActorPolicy {
    /// Treat the actor's token as zero.
    #[default]
    Zero,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub k_modes: usize,
    /// Fraction of past points masked for reconstruction.
    pub mask_ratio: f64,
    /// Metres per model coordinate unit.
    pub pos_scale: f64,
    pub unknown_actor: UnknownActorPolicy,
    /// Keep actor tokens across scene boundaries instead of resetting them.
    pub tokens_persist: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            emb_dim: 32,
            hidden_dim: 64,
            k_modes: 6,
            mask_ratio: 0.5,
            pos_scale: 10.0,
            unknown_actor: UnknownActorPolicy::Zero,
            tokens_persist: false,
        }
    }
}

pub(crate) const CONTEXT_DIM: usize = 4;

/// Tensor indices inside the [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Slots {
    pub fx_w: usize,
    pub fx_b: usize,
    pub fy_w: usize,
    pub fy_b: usize,
    pub fm_w: usize,
    pub fm_b: usize,
    pub e1_w: usize,
    pub e1_b: usize,
    pub e2_w: usize,
    pub e2_b: usize,
    pub p_w: usize,
    pub p_b: usize,
    pub heads: usize,
    pub r_w: usize,
    pub r_b: usize,
    pub mask: usize,
    pub tokens: usize,
}

impl Slots {
    fn new(k: usize) -> Self {
        let heads = 12;
        let r_w = heads + 2 * k;
        Slots {
            fx_w: 0,
            fx_b: 1,
            fy_w: 2,
            fy_b: 3,
            fm_w: 4,
            fm_b: 5,
            e1_w: 6,
            e1_b: 7,
            e2_w: 8,
            e2_b: 9,
            p_w: 10,
            p_b: 11,
            heads,
            r_w,
            r_b: r_w + 1,
            mask: r_w + 2,
            tokens: r_w + 3,
        }
    }

    pub fn head_w(&self, k: usize) -> usize {
        self.heads + 2 * k
    }

    pub fn head_b(&self, k: usize) -> usize {
        self.heads + 2 * k + 1
    }
}

/// Layer names in registry order.
pub const LAYERS: [&str; 9] = ["f_x", "f_y", "f_m", "enc1", "enc2", "pool", "decoder", "recon", "actor_tokens"];

/// The full parameter set of the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub(crate) cfg: ModelConfig,
    pub(crate) t_h: usize,
    pub(crate) t_f: usize,
    pub(crate) set: ParamSet,
    pub(crate) slots: Slots,
    token_ids: Vec<u64>,
    token_index: HashMap<u64, usize>,
}

fn gaussian(name: String, rows: usize, cols: usize, rng: &mut RngStream, scale: f64) -> ParamTensor {
    let std = scale / (cols as f64).sqrt();
    let values = (0..rows * cols).map(|_| std * rng.normal()).collect();
    ParamTensor::from_values(name, &[rows, cols], values).expect("shape")
}

impl ModelParams {
    /// Seeded initialisation: weights `N(0, 1/fan_in)`, zero biases and
    /// an empty actor-token table.
    pub fn init(cfg: &ModelConfig, t_h: usize, t_f: usize, rng: &mut RngStream) -> Result<Self> {
        if cfg.emb_dim == 0 || cfg.hidden_dim == 0 || cfg.k_modes == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if t_h < 2 || t_f == 0 {
            return Err(Error::config(format!("horizons t_h={t_h}, t_f={t_f} too short")));
        }
        if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio must lie in (0, 1)"));
        }
        if !(cfg.pos_scale > 0.0) {
            return Err(Error::config("pos_scale must be positive"));
        }
        let (e, h, k) = (cfg.emb_dim, cfg.hidden_dim, cfg.k_modes);
        let mut set = ParamSet::new();
        let lin = |set: &mut ParamSet, layer: &str, rows: usize, cols: usize, rng: &mut RngStream, scale: f64| {
            set.push_layer(
                layer,
                vec![
                    gaussian(format!("{layer}.weight"), rows, cols, rng, scale),
                    ParamTensor::zeros(format!("{layer}.bias"), &[rows]),
                ],
            )
        };
        lin(&mut set, "f_x", e, 2 * t_h, rng, 1.0)?;
        lin(&mut set, "f_y", e, 2 * t_f, rng, 1.0)?;
        lin(&mut set, "f_m", e, CONTEXT_DIM, rng, 1.0)?;
        lin(&mut set, "enc1", h, 2 * e, rng, 1.0)?;
        lin(&mut set, "enc2", h, h, rng, 1.0)?;
        lin(&mut set, "pool", h, h, rng, 0.5)?;
        let mut heads = Vec::with_capacity(2 * k);
        for m in 0..k {
            heads.push(gaussian(format!("decoder.{m}.weight"), 2 * t_f, h, rng, 0.5));
            heads.push(ParamTensor::zeros(format!("decoder.{m}.bias"), &[2 * t_f]));
        }
        set.push_layer("decoder", heads)?;
        set.push_layer(
            "recon",
            vec![
                gaussian("recon.weight".into(), 2 * t_h, h + e, rng, 0.5),
                ParamTensor::zeros("recon.bias", &[2 * t_h]),
                ParamTensor::zeros("recon.mask_token", &[2]),
            ],
        )?;
        set.push_layer("actor_tokens", vec![ParamTensor::zeros("actor_tokens.table", &[0, e])])?;
        Ok(ModelParams {
            cfg: cfg.clone(),
            t_h,
            t_f,
            set,
            slots: Slots::new(k),
            token_ids: Vec::new(),
            token_index: HashMap::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn t_h(&self) -> usize {
        self.t_h
    }

    pub fn t_f(&self) -> usize {
        self.t_f
    }

    pub fn k_modes(&self) -> usize {
        self.cfg.k_modes
    }

    pub fn params(&self) -> &ParamSet {
        &self.set
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.set
    }

    pub fn num_layers(&self) -> usize {
        self.set.registry().len()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.set.registry().index_of(name)
    }

    pub fn token_layer(&self) -> usize {
        self.set.registry().len() - 1
    }

    pub fn checksum(&self) -> u64 {
        self.set.checksum()
    }

    pub fn token_ids(&self) -> &[u64] {
        &self.token_ids
    }

    pub fn token_row(&self, id: u64) -> Option<usize> {
        self.token_index.get(&id).copied()
    }

    pub fn token(&self, id: u64) -> Option<&[f64]> {
        let e = self.cfg.emb_dim;
        self.token_row(id).map(|r| &self.set.tensor(self.slots.tokens).values()[r * e..(r + 1) * e])
    }

    pub fn token_mut(&mut self, id: u64) -> Option<&mut [f64]> {
        let e = self.cfg.emb_dim;
        let r = self.token_row(id)?;
        Some(&mut self.set.tensor_mut(self.slots.tokens).values_mut()[r * e..(r + 1) * e])
    }

    /// Allocate zero tokens for any ids not yet in the table.
    pub fn ensure_tokens(&mut self, ids: &[u64]) {
        let fresh: Vec<u64> = ids.iter().copied().filter(|id| !self.token_index.contains_key(id)).collect();
        for id in fresh {
            if self.token_index.contains_key(&id) {
                continue;
            }
            self.token_index.insert(id, self.token_ids.len());
            self.token_ids.push(id);
            self.set.tensor_mut(self.slots.tokens).grow_rows(1).expect("token table is rank 2");
        }
    }

    pub fn reset_tokens(&mut self) {
        self.token_ids.clear();
        self.token_index.clear();
        self.set.tensor_mut(self.slots.tokens).clear_rows();
    }

    pub fn tokens_all_zero(&self) -> bool {
        self.set.tensor(self.slots.tokens).values().iter().all(|&v| v == 0.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::serialize(&self.set, &self.token_ids)
    }

    /// Restore a checkpoint written by [`ModelParams::to_bytes`]; the
    /// stored shapes must match `cfg` and the horizons.
    pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig, t_h: usize, t_f: usize) -> Result<Self> {
        let (set, ids) = checkpoint::deserialize(bytes)?;
        let mut rng = RngStream::new(0, 0);
        let mut out = ModelParams::init(cfg, t_h, t_f, &mut rng)?;
        if set.registry().names() != out.set.registry().names() {
            return Err(Error::persistence(format!(
                "checkpoint layers {:?} do not match the model",
                set.registry().names()
            )));
        }
        for (i, (a, b)) in set.tensors().iter().zip(out.set.tensors()).enumerate() {
            let same_shape = if i == out.slots.tokens {
                a.shape().len() == 2 && a.shape()[1] == b.shape()[1] && a.shape()[0] == ids.len()
            } else {
                a.shape() == b.shape()
            };
            if a.name() != b.name() || !same_shape {
                return Err(Error::persistence(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    a.name(),
                    a.shape(),
                    b.name(),
                    b.shape()
                )));
            }
        }
        if set.tensors().len() != out.set.tensors().len() {
            return Err(Error::persistence("checkpoint tensor count mismatch"));
        }
        out.set = set;
        out.token_index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        out.token_ids = ids;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams {
        ModelParams::init(&ModelConfig::default(), 4, 12, &mut RngStream::new(1, 1)).unwrap()
    }

    #[test]
    fn registry_covers_all_tensors_and_layers() {
        let m = model();
        assert_eq!(m.params().registry().names(), LAYERS);
        assert_eq!(m.params().registry().members(6).len(), 2 * m.k_modes());
        let total: usize = (0..m.num_layers()).map(|l| m.params().registry().members(l).len()).sum();
        assert_eq!(total, m.params().tensors().len());
    }

    #[test]
    fn tokens_start_empty_and_grow_zeroed() {
        let mut m = model();
        assert!(m.token_ids().is_empty());
        m.ensure_tokens(&[5, 9, 5]);
        assert_eq!(m.token_ids(), [5, 9]);
        assert_eq!(m.token(9).unwrap(), vec![0.0; 32].as_slice());
        m.reset_tokens();
        assert!(m.token(5).is_none());
    }

    #[test]
    fn checkpoint_round_trip_with_tokens() {
        let mut m = model();
        m.ensure_tokens(&[3, 1]);
        m.token_mut(1).unwrap()[0] = 0.5;
        let back = ModelParams::from_bytes(&m.to_bytes(), &ModelConfig::default(), 4, 12).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let m = model();
        let cfg = ModelConfig {
            hidden_dim: 16,
            ..ModelConfig::default()
        };
        assert!(matches!(ModelParams::from_bytes(&m.to_bytes(), &cfg, 4, 12), Err(Error::Persistence(_))));
    }
}
