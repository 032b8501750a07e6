//! Run configuration: a flat `key = value` file with dotted keys.
//!
//! One setting per line, `#` starts a comment, unknown keys are errors.
//! A single top-level `seed` drives both phantom generation and
//! training so a whole run reproduces from one number; command-line
//! overrides apply through the same key/value path as the file.

use std::fmt::Write as _;

use thiserror::Error;

use crate::env::EnvConfig;
use crate::geometry::SpacingMm;
use crate::phantom::{FovMode, PhantomSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key {key:?}")]
    UnknownKey { key: String },
    #[error("config key {key:?}: {msg}")]
    BadValue { key: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Master seed; copied into the phantom and training seeds.
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub n_train: u32,
    pub n_test: u32,
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            phantom: PhantomSpec::default(),
            n_train: 16,
            n_test: 8,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn bad(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), msg: msg.into() }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse::<T>().map_err(|_| bad(key, format!("cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError> {
    v.split(',').map(|p| parse_scalar(key, p)).collect()
}

/// One value or a comma-separated triple, e.g. `64` or `64,64,48`.
fn parse_triple<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<[T; 3], ConfigError> {
    let parts = parse_list::<T>(key, v)?;
    match parts.as_slice() {
        [a] => Ok([*a, *a, *a]),
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(bad(key, format!("expected 1 or 3 values, got {}", other.len()))),
    }
}

impl Config {
    /// Applies one key/value pair; both the file parser and `--set`
    /// flags funnel through here.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_scalar(key, v)?,

            "phantom.dims" => self.phantom.dims = parse_triple(key, v)?,
            "phantom.spacing" => {
                let s = parse_triple::<f64>(key, v)?;
                self.phantom.spacing = SpacingMm::new(s[0], s[1], s[2]);
            }
            "phantom.organ_count" => self.phantom.organ_count = parse_scalar(key, v)?,
            "phantom.organ_intensity" => {
                let parts = parse_list::<f64>(key, v)?;
                match parts.as_slice() {
                    [lo, hi] => self.phantom.organ_intensity = (*lo, *hi),
                    other => {
                        return Err(bad(key, format!("expected 2 values, got {}", other.len())))
                    }
                }
            }
            "phantom.background" => self.phantom.background = parse_scalar(key, v)?,
            "phantom.noise_std" => self.phantom.noise_std = parse_scalar(key, v)?,
            "phantom.fov" => {
                self.phantom.fov = match v {
                    "full" => FovMode::Full,
                    "cropped" => FovMode::Cropped,
                    other => return Err(bad(key, format!("expected full|cropped, got {other:?}"))),
                }
            }
            "phantom.n_train" => self.n_train = parse_scalar(key, v)?,
            "phantom.n_test" => self.n_test = parse_scalar(key, v)?,

            "env.alpha" => self.env.alpha = parse_scalar(key, v)?,
            "env.tau" => self.env.tau = parse_scalar(key, v)?,
            "env.crop_edge" => self.env.crop_edge = parse_scalar(key, v)?,
            "env.max_steps_train" => self.env.max_steps_train = parse_scalar(key, v)?,
            "env.max_steps_eval" => self.env.max_steps_eval = parse_scalar(key, v)?,
            "env.min_extent" => self.env.min_extent_voxels = parse_scalar(key, v)?,
            "env.gamma" => self.env.gamma = parse_scalar(key, v)?,
            "env.taller_grows" => self.env.taller_grows = parse_scalar(key, v)?,
            "env.reset_jitter" => self.env.reset_jitter = parse_scalar(key, v)?,

            "net.hidden" => {
                let widths = parse_list::<usize>(key, v)?;
                if widths.is_empty() {
                    return Err(bad(key, "expected at least one layer width"));
                }
                self.train.hidden = widths;
            }
            "net.learning_rate" => self.train.learning_rate = parse_scalar(key, v)?,

            "train.epochs" => self.train.epochs = parse_scalar(key, v)?,
            "train.anneal_epochs" => self.train.anneal_epochs = parse_scalar(key, v)?,
            "train.eps_start" => self.train.eps_start = parse_scalar(key, v)?,
            "train.eps_end" => self.train.eps_end = parse_scalar(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_scalar(key, v)?,
            "train.target_sync" => self.train.target_sync = parse_scalar(key, v)?,
            "train.warmup" => self.train.warmup = parse_scalar(key, v)?,
            "train.replay_capacity" => self.train.replay_capacity = parse_scalar(key, v)?,

            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.phantom_spec()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.env.validate().map_err(ConfigError::Invalid)?;
        self.train_config().validate().map_err(ConfigError::Invalid)?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(ConfigError::Invalid("phantom.n_train and phantom.n_test must be positive".into()));
        }
        Ok(())
    }

    /// Phantom template with the master seed applied.
    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec { seed: self.seed, ..self.phantom.clone() }
    }

    /// Training config with the master seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Canonical listing of every key at its effective value, sorted;
    /// parsing it back yields an identical config.
    pub fn to_display_string(&self) -> String {
        let sp = self.phantom.spacing;
        let mut pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("phantom.dims", format!("{},{},{}", self.phantom.dims[0], self.phantom.dims[1], self.phantom.dims[2])),
            ("phantom.spacing", format!("{},{},{}", sp.x, sp.y, sp.z)),
            ("phantom.organ_count", self.phantom.organ_count.to_string()),
            ("phantom.organ_intensity", format!("{},{}", self.phantom.organ_intensity.0, self.phantom.organ_intensity.1)),
            ("phantom.background", self.phantom.background.to_string()),
            ("phantom.noise_std", self.phantom.noise_std.to_string()),
            ("phantom.fov", match self.phantom.fov {
                FovMode::Full => "full".into(),
                FovMode::Cropped => "cropped".into(),
            }),
            ("phantom.n_train", self.n_train.to_string()),
            ("phantom.n_test", self.n_test.to_string()),
            ("env.alpha", self.env.alpha.to_string()),
            ("env.tau", self.env.tau.to_string()),
            ("env.crop_edge", self.env.crop_edge.to_string()),
            ("env.max_steps_train", self.env.max_steps_train.to_string()),
            ("env.max_steps_eval", self.env.max_steps_eval.to_string()),
            ("env.min_extent", self.env.min_extent_voxels.to_string()),
            ("env.gamma", self.env.gamma.to_string()),
            ("env.taller_grows", self.env.taller_grows.to_string()),
            ("env.reset_jitter", self.env.reset_jitter.to_string()),
            ("net.hidden", self.train.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")),
            ("net.learning_rate", self.train.learning_rate.to_string()),
            ("train.epochs", self.train.epochs.to_string()),
            ("train.anneal_epochs", self.train.anneal_epochs.to_string()),
            ("train.eps_start", self.train.eps_start.to_string()),
            ("train.eps_end", self.train.eps_end.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.target_sync", self.train.target_sync.to_string()),
            ("train.warmup", self.train.warmup.to_string()),
            ("train.replay_capacity", self.train.replay_capacity.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }
}

/// Parses a config file's text on top of the defaults.
pub fn parse_config(text: &str) -> Result<Config, ConfigError> {
    let mut cfg = Config::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
            line,
            msg: format!("expected `key = value`, got {content:?}"),
        })?;
        cfg.apply(key.trim(), value).map_err(|e| match e {
            ConfigError::UnknownKey { key } => ConfigError::Parse {
                line,
                msg: format!("unknown key {key:?}"),
            },
            ConfigError::BadValue { key, msg } => ConfigError::Parse {
                line,
                msg: format!("key {key:?}: {msg}"),
            },
            other => other,
        })?;
    }
    Ok(cfg)
}
