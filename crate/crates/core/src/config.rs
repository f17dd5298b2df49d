//! `key = value` configuration with dotted keys (`train.alpha`,
//! `world.n_ads`). The same text format is used for config files, `--set`
//! overrides, the effective-config echo and the checkpoint snapshot.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{Architecture, InitScheme, INIT_SCALE};
use crate::synth::WorldConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: V::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    let v = value.trim().trim_start_matches('[').trim_end_matches(']');
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|d| parse_value(key, d)).collect()
}

/// Splits `key = value` text into pairs, skipping blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Every training hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Skip-gram window `C`.
    pub context_window: usize,
    /// Negatives per skip-gram pair `Q`.
    pub num_negatives: usize,
    pub dropout: f64,
    /// Embedding dimension `K`.
    pub embedding_dim: usize,
    pub layer_dims: Vec<usize>,
    /// Matching / correlation representation size `M`.
    pub repr_dim: usize,
    pub hash_space: usize,
    /// Half-width of the uniform weight and embedding init.
    pub init_scale: f64,
    /// FC weight init; see [`InitScheme`].
    pub init: InitScheme,
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            learning_rate: 0.01,
            batch_size: 128,
            context_window: 2,
            num_negatives: 4,
            dropout: 0.5,
            embedding_dim: 10,
            layer_dims: vec![512, 256],
            repr_dim: 64,
            hash_space: 1 << 22,
            init_scale: INIT_SCALE,
            init: InitScheme::Uniform,
            epochs: 1,
            eval_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 16] = [
        "alpha",
        "beta",
        "learning_rate",
        "batch_size",
        "context_window",
        "num_negatives",
        "dropout",
        "embedding_dim",
        "layer_dims",
        "repr_dim",
        "hash_space",
        "init_scale",
        "init",
        "epochs",
        "eval_every",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let full = format!("train.{key}");
        match key {
            "alpha" => self.alpha = parse_value(&full, value)?,
            "beta" => self.beta = parse_value(&full, value)?,
            "learning_rate" => self.learning_rate = parse_value(&full, value)?,
            "batch_size" => self.batch_size = parse_value(&full, value)?,
            "context_window" => self.context_window = parse_value(&full, value)?,
            "num_negatives" => self.num_negatives = parse_value(&full, value)?,
            "dropout" => self.dropout = parse_value(&full, value)?,
            "embedding_dim" => self.embedding_dim = parse_value(&full, value)?,
            "layer_dims" => self.layer_dims = parse_dims(&full, value)?,
            "repr_dim" => self.repr_dim = parse_value(&full, value)?,
            "hash_space" => self.hash_space = parse_value(&full, value)?,
            "init_scale" => self.init_scale = parse_value(&full, value)?,
            "init" => self.init = parse_value(&full, value)?,
            "epochs" => self.epochs = parse_value(&full, value)?,
            "eval_every" => self.eval_every = parse_value(&full, value)?,
            "seed" => self.seed = parse_value(&full, value)?,
            _ => return Err(ConfigError::UnknownKey(full)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "context_window" => self.context_window.to_string(),
            "num_negatives" => self.num_negatives.to_string(),
            "dropout" => self.dropout.to_string(),
            "embedding_dim" => self.embedding_dim.to_string(),
            "layer_dims" => self
                .layer_dims
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "repr_dim" => self.repr_dim.to_string(),
            "hash_space" => self.hash_space.to_string(),
            "init_scale" => self.init_scale.to_string(),
            "init" => self.init.as_str().to_string(),
            "epochs" => self.epochs.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("train.alpha must be a finite value >= 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("train.beta must be a finite value >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be > 0");
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad("train.init_scale must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("train.dropout must be in [0, 1)");
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("context_window", self.context_window),
            ("embedding_dim", self.embedding_dim),
            ("repr_dim", self.repr_dim),
            ("hash_space", self.hash_space),
            ("epochs", self.epochs),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("train.{name} must be >= 1")));
            }
        }
        if self.layer_dims.contains(&0) {
            return bad("train.layer_dims entries must be >= 1");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hash_space: self.hash_space,
            embedding_dim: self.embedding_dim,
            layer_dims: self.layer_dims.clone(),
            repr_dim: self.repr_dim,
            dropout: self.dropout,
        }
    }

    /// `train.<key> = <value>` lines in [`TrainConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "train.{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }
}

impl WorldConfig {
    pub const KEYS: [&'static str; 8] = [
        "n_users",
        "n_ads",
        "n_ad_clusters",
        "latent_dim",
        "affinity_scale",
        "base_ctr",
        "impressions_per_user",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let full = format!("world.{key}");
        match key {
            "n_users" => self.n_users = parse_value(&full, value)?,
            "n_ads" => self.n_ads = parse_value(&full, value)?,
            "n_ad_clusters" => self.n_ad_clusters = parse_value(&full, value)?,
            "latent_dim" => self.latent_dim = parse_value(&full, value)?,
            "affinity_scale" => self.affinity_scale = parse_value(&full, value)?,
            "base_ctr" => self.base_ctr = parse_value(&full, value)?,
            "impressions_per_user" => self.impressions_per_user = parse_value(&full, value)?,
            "seed" => self.seed = parse_value(&full, value)?,
            _ => return Err(ConfigError::UnknownKey(full)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "n_users" => self.n_users.to_string(),
            "n_ads" => self.n_ads.to_string(),
            "n_ad_clusters" => self.n_ad_clusters.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "affinity_scale" => self.affinity_scale.to_string(),
            "base_ctr" => self.base_ctr.to_string(),
            "impressions_per_user" => self.impressions_per_user.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "world.{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }
}

/// Effective configuration of one CLI run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub world: WorldConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key.split_once('.') {
            Some(("train", k)) => self.train.set(k, value),
            Some(("world", k)) => self.world.set(k, value),
            _ => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    /// Applies `key = value` text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax { line: 1 })?;
        self.set(k.trim(), v.trim())
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.train.to_text(), self.world.to_text())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate()?;
        self.world
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
