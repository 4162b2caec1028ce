//! Flat `key=value` settings shared by the command-line tool.
//!
//! Files hold one `namespace.key=value` per line; `#` starts a comment. Every
//! key must be one of [`KEYS`]. Command-line flags are applied on top with
//! [`CliConfig::set`], so flags win.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::bench::SynthSpec;
use crate::train::{Optimizer, Regime, TrainConfig};
use crate::zoo::{MobileNetConfig, ModelSpec, ResNetConfig, SmallCnnConfig, Stem, MOBILE_NET, RESIDUAL_NET, SMALL_CNN};

pub const SEED_ENV: &str = "EDGELOOP_SEED";
pub const FALLBACK_SEED: u64 = 7;

/// Recognized keys and their defaults. `train.seed` has no default; see
/// [`CliConfig::seed`].
pub const KEYS: &[(&str, &str)] = &[
    ("data.classes", "8"),
    ("data.per_class", "50"),
    ("data.size", "64"),
    ("data.shift", "0"),
    ("data.first_glyph", "0"),
    ("data.test_fraction", "0.2"),
    ("model.family", SMALL_CNN),
    ("model.size", "64"),
    ("model.blocks", "2"),
    ("model.base_channels", "8"),
    // 0 selects the family's default width.
    ("model.fc1_out", "0"),
    ("model.dropout", "0.25"),
    ("model.stages", "2,2"),
    ("model.stem", "compact"),
    ("train.epochs", "5"),
    ("train.batch_size", "32"),
    ("train.learning_rate", "0.001"),
    ("train.optimizer", "adam"),
    ("train.momentum", "0.9"),
    ("train.regime", "tfs"),
    ("train.augment", "true"),
    ("train.seed", ""),
    ("bench.blocks", "2,3,4"),
    ("bench.mobile", "true"),
    ("bench.jobs", "1"),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unknown configuration key `{key}`")]
    UnknownKey { key: String },
    #[error("config line {line}: expected key=value, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("invalid value `{value}` for `{key}`: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("cannot read config {path}: {msg}")]
    Unreadable { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            values: KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

impl CliConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = CliConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (k, _) = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| ConfigError::UnknownKey { key: key.to_string() })?;
        self.values.insert(k, value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Result<&str, ConfigError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError::UnknownKey { key: key.to_string() })
    }

    pub fn get<T: FromStr>(&self, key: &str, expected: &'static str) -> Result<T, ConfigError> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| bad(key, v, expected))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let v = self.raw(key)?;
        v.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .ok()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| bad(key, v, "a comma-separated list of integers"))
    }

    /// `train.seed` if set, else the `EDGELOOP_SEED` value passed as `env`, else 7.
    pub fn seed(&self, env: Option<&str>) -> Result<u64, ConfigError> {
        let v = self.raw("train.seed")?;
        if !v.is_empty() {
            return v.parse().map_err(|_| bad("train.seed", v, "an unsigned integer"));
        }
        match env {
            Some(e) => e.trim().parse().map_err(|_| bad(SEED_ENV, e, "an unsigned integer")),
            None => Ok(FALLBACK_SEED),
        }
    }

    pub fn synth_spec(&self, seed: u64) -> Result<SynthSpec, ConfigError> {
        Ok(SynthSpec {
            num_classes: self.get("data.classes", "a class count")?,
            samples_per_class: self.get("data.per_class", "a sample count")?,
            image_size: self.get("data.size", "an image size in pixels")?,
            shift: self.get("data.shift", "a number in [0, 1]")?,
            seed,
            first_glyph: self.get("data.first_glyph", "a glyph index")?,
        })
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, ConfigError> {
        let optimizer = match self.raw("train.optimizer")? {
            "adam" => Optimizer::default(),
            "sgd" => Optimizer::Sgd {
                momentum: self.get("train.momentum", "a momentum in [0, 1)")?,
            },
            other => return Err(bad("train.optimizer", other, "adam or sgd")),
        };
        let regime: Regime = self.get("train.regime", "fe, ft or tfs")?;
        Ok(TrainConfig {
            epochs: self.get("train.epochs", "an epoch count")?,
            batch_size: self.get("train.batch_size", "a batch size")?,
            learning_rate: self.get("train.learning_rate", "a positive number")?,
            optimizer,
            regime,
            seed,
            augment: self.get("train.augment", "true or false")?,
        })
    }

    /// The configured model for `num_classes` classes.
    pub fn model_spec(&self, num_classes: usize) -> Result<ModelSpec, ConfigError> {
        let size: usize = self.get("model.size", "an image size in pixels")?;
        let blocks: usize = self.get("model.blocks", "a block count")?;
        let base: usize = self.get("model.base_channels", "a channel count")?;
        let fc1: usize = self.get("model.fc1_out", "a neuron count (0 for the default)")?;
        let dropout: f64 = self.get("model.dropout", "a fraction in [0, 1)")?;
        let mut small = SmallCnnConfig::new(size, blocks, base, num_classes);
        small.dropout_p = dropout;
        if fc1 > 0 {
            small.fc1_out = fc1;
        }
        Ok(match self.raw("model.family")? {
            SMALL_CNN => ModelSpec::SmallCnn(small),
            MOBILE_NET => ModelSpec::MobileNet(MobileNetConfig::matching(&small)),
            RESIDUAL_NET => ModelSpec::Residual(ResNetConfig {
                image_size: size,
                blocks_per_stage: self.list("model.stages")?,
                base_channels: base,
                num_classes,
                stem: match self.raw("model.stem")? {
                    "compact" => Stem::Compact,
                    "imagenet" => Stem::ImageNet,
                    other => return Err(bad("model.stem", other, "compact or imagenet")),
                },
            }),
            other => return Err(bad("model.family", other, "small_cnn, mobile_net or residual_net")),
        })
    }

    /// SmallCNN variants for the trade-off bench (one per `bench.blocks`
    /// entry, sharing the other `model.*` settings), plus the depthwise
    /// counterpart of the first when `bench.mobile` is set.
    pub fn bench_models(&self, num_classes: usize) -> Result<Vec<ModelSpec>, ConfigError> {
        let size: usize = self.get("model.size", "an image size in pixels")?;
        let base: usize = self.get("model.base_channels", "a channel count")?;
        let fc1: usize = self.get("model.fc1_out", "a neuron count (0 for the default)")?;
        let dropout: f64 = self.get("model.dropout", "a fraction in [0, 1)")?;
        let mut out = Vec::new();
        for n in self.list("bench.blocks")? {
            let mut c = SmallCnnConfig::new(size, n, base, num_classes);
            c.dropout_p = dropout;
            if fc1 > 0 {
                c.fc1_out = fc1;
            }
            out.push(ModelSpec::SmallCnn(c));
        }
        if self.get::<bool>("bench.mobile", "true or false")? {
            if let Some(ModelSpec::SmallCnn(first)) = out.first() {
                out.push(ModelSpec::MobileNet(MobileNetConfig::matching(first)));
            }
        }
        Ok(out)
    }
}

fn bad(key: &str, value: &str, expected: &'static str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    }
}
