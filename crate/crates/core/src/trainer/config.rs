use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorArch;
use crate::error::{Error, Result};
use crate::generator::GeneratorArch;
use crate::losses::LossWeights;
use crate::optim::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Standard,
    Compact,
}

/// Training hyper-parameters. Stored as flat `key = value` text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub pixel_every: u64,
    pub d_every: u64,
    pub max_iters: u64,
    pub seed: u64,
    /// `morph`, `cacd` or `custom`.
    pub weights: String,
    pub lambda_adv: Option<f64>,
    pub lambda_identity: Option<f64>,
    pub lambda_age: Option<f64>,
    pub lambda_pixel: Option<f64>,
    pub checkpoint_every: u64,
    pub folds: usize,
    /// Fold held out from training; `None` trains on everything.
    pub test_fold: Option<usize>,
    pub arch: ArchKind,
    pub image_size: usize,
    pub zero_init_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            batch_size: 10,
            pixel_every: 5,
            d_every: 2,
            max_iters: 10_000,
            seed: 0,
            weights: "morph".into(),
            lambda_adv: None,
            lambda_identity: None,
            lambda_age: None,
            lambda_pixel: None,
            checkpoint_every: 1000,
            folds: 5,
            test_fold: None,
            arch: ArchKind::Standard,
            image_size: 128,
            zero_init_output: true,
        }
    }
}

impl TrainConfig {
    /// Parses config text, rejecting unknown keys by name.
    pub fn from_text(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let known = Self::keys();
        for k in table.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// All accepted keys, in file order.
    pub fn keys() -> Vec<&'static str> {
        vec![
            "lr",
            "beta1",
            "beta2",
            "batch_size",
            "pixel_every",
            "d_every",
            "max_iters",
            "seed",
            "weights",
            "lambda_adv",
            "lambda_identity",
            "lambda_age",
            "lambda_pixel",
            "checkpoint_every",
            "folds",
            "test_fold",
            "arch",
            "image_size",
            "zero_init_output",
        ]
    }

    /// Applies `key=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let mut parsed = BTreeMap::new();
        for (k, v) in overrides {
            if !Self::keys().contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            parsed.insert(k.clone(), parse_scalar(v));
        }
        for (k, v) in parsed {
            if k == "test_fold" && v.as_str() == Some("none") {
                table.remove(&k);
            } else {
                table.insert(k, v);
            }
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixel_every < 1 || self.d_every < 1 || self.batch_size < 1 {
            return Err(Error::Config("pixel_every, d_every and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} must lie in [0, 1), got {b}")));
            }
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if let Some(t) = self.test_fold {
            if t >= self.folds {
                return Err(Error::Config(format!("test_fold {t} must be < folds {}", self.folds)));
            }
        }
        if self.arch == ArchKind::Standard && self.image_size != 128 {
            return Err(Error::Config("the standard architecture needs image_size = 128".into()));
        }
        self.loss_weights()?;
        self.generator_arch()?;
        Ok(())
    }

    /// Preset weights, with any explicit `lambda_*` taking precedence.
    pub fn loss_weights(&self) -> Result<LossWeights> {
        let base = match self.weights.as_str() {
            "custom" => None,
            name => Some(
                LossWeights::preset(name)
                    .ok_or_else(|| Error::Config(format!("unknown weights preset `{name}` (morph, cacd or custom)")))?,
            ),
        };
        let pick = |explicit: Option<f64>, preset: Option<f64>, key: &str| {
            explicit
                .or(preset)
                .ok_or_else(|| Error::Config(format!("weights = custom requires {key}")))
        };
        let w = LossWeights {
            adv: pick(self.lambda_adv, base.map(|b| b.adv), "lambda_adv")?,
            identity: pick(self.lambda_identity, base.map(|b| b.identity), "lambda_identity")?,
            age: pick(self.lambda_age, base.map(|b| b.age), "lambda_age")?,
            pixel: pick(self.lambda_pixel, base.map(|b| b.pixel), "lambda_pixel")?,
        };
        w.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(w)
    }

    /// Copy with every weight spelled out, for snapshots.
    pub fn resolved(&self) -> Result<Self> {
        let w = self.loss_weights()?;
        Ok(Self {
            lambda_adv: Some(w.adv),
            lambda_identity: Some(w.identity),
            lambda_age: Some(w.age),
            lambda_pixel: Some(w.pixel),
            ..self.clone()
        })
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    pub fn generator_arch(&self) -> Result<GeneratorArch> {
        let mut arch = match self.arch {
            ArchKind::Standard => GeneratorArch::standard(),
            ArchKind::Compact => GeneratorArch::compact(self.image_size).map_err(|e| Error::Config(e.to_string()))?,
        };
        arch.zero_init_output = self.zero_init_output;
        arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(arch)
    }

    pub fn discriminator_arch(&self) -> DiscriminatorArch {
        match self.arch {
            ArchKind::Standard => DiscriminatorArch::standard(),
            ArchKind::Compact => DiscriminatorArch::compact(self.image_size),
        }
    }

    /// Whether 1-based generator iteration `iter` includes the pixel term.
    pub fn pixel_active(&self, iter: u64) -> bool {
        iter % self.pixel_every == 0
    }

    /// Whether 1-based generator iteration `iter` also updates the discriminator.
    pub fn d_active(&self, iter: u64) -> bool {
        iter % self.d_every == 0
    }
}

/// Interprets a command-line value as a bool, integer, float or string.
fn parse_scalar(v: &str) -> toml::Value {
    if let Ok(b) = v.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = v.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = v.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(v.to_string())
}
