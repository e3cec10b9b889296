use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::eval::EvalConfig;
use crate::predictor::ModelConfig;
use crate::pretrain::{MetaConfig, OfflineConfig};
use crate::scenegen::{min_scene_length, DomainFamily, Horizons};
use crate::ttt::TttConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HorizonPreset {
    ShortTerm,
    #[default]
    LongTerm,
}

impl HorizonPreset {
    pub fn horizons(self) -> Horizons {
        match self {
            HorizonPreset::ShortTerm => Horizons::SHORT_TERM,
            HorizonPreset::LongTerm => Horizons::LONG_TERM,
        }
    }
}

/// Corpus sizes for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_scenes: usize,
    pub val_scenes: usize,
    pub target_scenes: usize,
    pub agents: usize,
    /// Online samples per source scene.
    pub source_length: usize,
    /// Online samples per target scene.
    pub target_length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source_scenes: 48,
            val_scenes: 8,
            target_scenes: 12,
            agents: 4,
            source_length: 84,
            target_length: 120,
        }
    }
}

/// The three MetaDAT components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    /// Meta pre-training.
    pub mp: bool,
    /// Hypergradient learning rates.
    pub dlo: bool,
    /// Hard-sample extra updates.
    pub hsd: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::ALL
    }
}

impl Toggles {
    pub const NONE: Toggles = Toggles {
        mp: false,
        dlo: false,
        hsd: false,
    };
    pub const ALL: Toggles = Toggles {
        mp: true,
        dlo: true,
        hsd: true,
    };

    pub fn code(&self) -> String {
        format!("mp{}-dlo{}-hsd{}", self.mp as u8, self.dlo as u8, self.hsd as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Initial learning rates for the learning-rate sweep.
    pub alphas: Vec<f64>,
    /// Update frequencies for the frequency sweep.
    pub frequencies: Vec<usize>,
    /// Supervision budgets for the few-shot table.
    pub budgets: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: vec![1e-2, 1e-3, 1e-4],
            frequencies: vec![1, 2, 3, 5],
            budgets: vec![200, 500, 1000],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: DomainFamily,
    pub target: DomainFamily,
    pub horizons: HorizonPreset,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub offline: OfflineConfig,
    pub meta: MetaConfig,
    pub ttt: TttConfig,
    pub eval: EvalConfig,
    pub toggles: Toggles,
    pub sweep: SweepConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            source: DomainFamily::source(),
            target: DomainFamily::target(),
            horizons: HorizonPreset::LongTerm,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            offline: OfflineConfig::default(),
            meta: MetaConfig::default(),
            ttt: TttConfig::default(),
            eval: EvalConfig::default(),
            toggles: Toggles::ALL,
            sweep: SweepConfig::default(),
            seeds: (0..10).collect(),
            out: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.source.validate("source")?;
        self.target.validate("target")?;
        let m = &self.model;
        let v = |f: &str, msg: &str| Err(Error::validation(f, msg));
        if m.emb_dim == 0 {
            return v("model.emb_dim", "must be >= 1");
        }
        if m.hidden_dim == 0 {
            return v("model.hidden_dim", "must be >= 1");
        }
        if m.k_modes == 0 {
            return v("model.k_modes", "must be >= 1");
        }
        if !(m.mask_ratio > 0.0 && m.mask_ratio < 1.0) {
            return v("model.mask_ratio", "must lie in (0, 1)");
        }
        if !(m.pos_scale > 0.0 && m.pos_scale.is_finite()) {
            return v("model.pos_scale", "must be > 0");
        }
        self.offline.validate("offline")?;
        self.meta.validate("meta")?;
        self.ttt.validate("ttt")?;
        self.eval.validate("eval")?;
        if self.eval.k > m.k_modes {
            return v("eval.k", "exceeds model.k_modes");
        }
        let h = self.horizons.horizons();
        let d = &self.data;
        if d.agents == 0 {
            return v("data.agents", "must be >= 1");
        }
        if d.source_scenes == 0 {
            return v("data.source_scenes", "must be >= 1");
        }
        if d.target_scenes == 0 {
            return v("data.target_scenes", "must be >= 1");
        }
        let need = min_scene_length(h.t_h, h.t_f, self.meta.k_inner, self.meta.tau);
        if d.source_length < need {
            return Err(Error::validation(
                "data.source_length",
                format!("must be >= {need} to hold one adaptation task"),
            ));
        }
        if d.target_length <= h.t_h {
            return Err(Error::validation("data.target_length", format!("must exceed t_h = {}", h.t_h)));
        }
        if self.seeds.is_empty() {
            return v("seeds", "must not be empty");
        }
        if self.sweep.alphas.is_empty() {
            return v("sweep.alphas", "must not be empty");
        }
        if let Some(a) = self.sweep.alphas.iter().find(|a| !(**a >= self.ttt.alpha_min && **a <= self.ttt.alpha_max)) {
            return Err(Error::validation("sweep.alphas", format!("{a} outside [ttt.alpha_min, ttt.alpha_max]")));
        }
        if self.sweep.frequencies.is_empty() || self.sweep.frequencies.contains(&0) {
            return v("sweep.frequencies", "must be a non-empty list of positive integers");
        }
        if self.sweep.budgets.is_empty() {
            return v("sweep.budgets", "must not be empty");
        }
        if self.out.as_os_str().is_empty() {
            return v("out", "must not be empty");
        }
        Ok(())
    }

    /// Flat `dotted.key = value` text, keys sorted; parsing it gives back
    /// the same configuration.
    pub fn dump(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serialises");
        let mut lines = Vec::new();
        flatten(&value, "", &mut |k, v| lines.push(format!("{k} = {v}")));
        lines.push(String::new());
        lines.join("\n")
    }

    /// SHA-256 of [`ExperimentConfig::dump`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.dump().as_bytes()))
    }
}

fn flatten(v: &toml::Value, prefix: &str, out: &mut dyn FnMut(&str, &toml::Value)) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(v, &key, out);
            }
        }
        leaf => out(prefix, leaf),
    }
}

fn key_set(v: &toml::Value) -> BTreeSet<String> {
    let mut keys = BTreeSet::new();
    flatten(v, "", &mut |k, _| {
        keys.insert(k.to_string());
    });
    keys
}

/// Parse configuration text. Missing keys take their defaults; the
/// supervision intervals default to the preset's `t_f`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    let value = toml::Value::Table(table);
    let known = key_set(&toml::Value::try_from(ExperimentConfig::default()).expect("config serialises"));
    let unknown: Vec<String> = key_set(&value).into_iter().filter(|k| !known.contains(k)).collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownKeys(unknown));
    }
    let given = key_set(&value);
    let mut cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    let t_f = cfg.horizons.horizons().t_f;
    if !given.contains("ttt.tau") {
        cfg.ttt.tau = t_f;
    }
    if !given.contains("meta.tau") {
        cfg.meta.tau = t_f;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.meta.batch_size, 4);
        assert_eq!(cfg.meta.k_inner, 4);
        assert_eq!(cfg.ttt.gamma, 1e-4);
        assert_eq!(cfg.ttt.tau_alpha, 8);
        assert_eq!(cfg.ttt.k, 3.0);
        assert_eq!(cfg.ttt.tau, 12);
    }

    #[test]
    fn negative_k_names_the_field() {
        match parse_config("ttt.k = -1.0") {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "ttt.k"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_listed() {
        match parse_config("ttt.kk = 1.0\n[meta]\nfoo = 2\nbatch_size = 2\n") {
            Err(Error::UnknownKeys(keys)) => assert_eq!(keys, vec!["meta.foo".to_string(), "ttt.kk".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.ttt.alpha_init = 0.01;
        cfg.seeds = vec![3, 1, 4];
        cfg.source.speed_mean.std = 0.3;
        cfg.horizons = HorizonPreset::ShortTerm;
        cfg.ttt.tau = 30;
        cfg.meta.tau = 30;
        cfg.data.source_length = 200;
        cfg.model.tokens_persist = true;
        let text = cfg.dump();
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.dump(), text);
        assert!(text.lines().all(|l| l.is_empty() || !l.starts_with('[')));
    }

    #[test]
    fn short_term_preset_sets_intervals() {
        let cfg = parse_config("horizons = \"short-term\"\ndata.source_length = 200").unwrap();
        assert_eq!((cfg.ttt.tau, cfg.meta.tau), (30, 30));
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = ExperimentConfig::default();
        let text = base.dump();
        let h0 = base.hash();
        assert_eq!(h0, parse_config(&text).unwrap().hash());
        // Perturb each leaf once; every perturbation must change the hash.
        let table: toml::Table = text.parse().unwrap();
        let mut keys = Vec::new();
        flatten(&toml::Value::Table(table), "", &mut |k, v| keys.push((k.to_string(), v.clone())));
        let mut changed = 0;
        for (k, v) in &keys {
            let nv = match v {
                toml::Value::Float(f) => format!("{}", f * 1.5 + 0.125),
                toml::Value::Integer(i) => format!("{}", i + 1),
                toml::Value::Boolean(b) => format!("{}", !b),
                toml::Value::String(s) if k == "out" => format!("\"{s}x\""),
                toml::Value::String(_) => continue,
                toml::Value::Array(a) if a.is_empty() => continue,
                toml::Value::Array(a) => match &a[0] {
                    toml::Value::Float(_) => "[0.5]".into(),
                    _ => "[7]".into(),
                },
                _ => continue,
            };
            let leaf = format!("x = {nv}").parse::<toml::Table>().unwrap()["x"].clone();
            let mut t: toml::Table = text.parse().unwrap();
            set_dotted(&mut t, k, leaf);
            let cfg: ExperimentConfig = toml::Value::Table(t).try_into().unwrap();
            assert_ne!(cfg.hash(), h0, "{k}");
            changed += 1;
        }
        assert!(changed > 60, "{changed}");
    }

    fn set_dotted(t: &mut toml::Table, key: &str, v: toml::Value) {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().unwrap();
        let mut cur = t;
        for p in parts {
            cur = cur.get_mut(p).unwrap().as_table_mut().unwrap();
        }
        cur.insert(last.to_string(), v);
    }
}
