//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # two-convolution variant
//! dataset = cifar10
//! conv.count = 2
//! conv.1.filters = 256
//! train.epochs = 25
//! ```
//!
//! Unlisted keys keep the CIFAR-10 baseline defaults. `conv.N.*` and
//! `stack.N.*` address entries below `conv.count` / `stack.count`. The
//! input shape, decoder output size and output capsule count follow from
//! `dataset`, `data.crop` and `nota`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::capsule::{Activation, RoutingCapsuleConfig};
use crate::data::AugmentationConfig;
use crate::model::{ConvLayerConfig, InputShape, ModelConfig, ModelError};
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for `{key}`: {detail}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Cifar10,
}

impl Dataset {
    pub fn name(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Cifar10 => "cifar10",
        }
    }

    pub fn input(self) -> InputShape {
        match self {
            Dataset::Mnist => InputShape {
                channels: 1,
                height: 28,
                width: 28,
            },
            Dataset::Cifar10 => InputShape {
                channels: 3,
                height: 32,
                width: 32,
            },
        }
    }
}

impl FromStr for Dataset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(Dataset::Mnist),
            "cifar10" => Ok(Dataset::Cifar10),
            _ => Err("expected mnist or cifar10".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub data_dir: Option<PathBuf>,
    /// Use only the first N training / validation examples.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Cifar10,
            data_dir: None,
            train_limit: None,
            val_limit: None,
            model: ModelConfig::cifar10_baseline(),
            train: TrainConfig {
                epochs: 50,
                ..TrainConfig::default()
            },
        }
    }
}

struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn parse<V: FromStr>(&self) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.value.parse().map_err(|e: V::Err| self.bad(e.to_string()))
    }

    fn bad(&self, detail: impl Into<String>) -> ConfigError {
        ConfigError::BadValue {
            line: self.line,
            key: self.key.to_string(),
            value: self.value.to_string(),
            detail: detail.into(),
        }
    }

    fn unknown(&self) -> ConfigError {
        ConfigError::UnknownKey {
            line: self.line,
            key: self.key.to_string(),
        }
    }

    fn limit(&self) -> Result<Option<usize>> {
        Ok(match self.parse::<usize>()? {
            0 => None,
            n => Some(n),
        })
    }
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(e.bad("expected true or false")),
    }
}

fn parse_list(e: &Entry) -> Result<Vec<usize>> {
    if e.value.is_empty() {
        return Ok(Vec::new());
    }
    e.value
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|err| e.bad(err.to_string())))
        .collect()
}

/// Splits `prefix.N.field` into `(N, field)`.
fn indexed<'a>(key: &'a str, prefix: &str) -> Option<(usize, &'a str)> {
    let rest = key.strip_prefix(prefix)?.strip_prefix('.')?;
    let (index, field) = rest.split_once('.')?;
    Some((index.parse().ok()?, field))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_string(),
                });
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            entries.push(Entry { line, key, value });
        }

        let mut cfg = RunConfig::default();
        let find = |k: &str| entries.iter().find(|e| e.key == k);
        if let Some(e) = find("dataset") {
            cfg.dataset = e.parse().map_err(|_| e.bad("expected mnist or cifar10"))?;
        }
        let conv_count = find("conv.count").map(|e| e.parse::<usize>()).transpose()?.unwrap_or(1);
        let stack_count = find("stack.count")
            .map(|e| e.parse::<usize>())
            .transpose()?
            .unwrap_or(0);
        let base_conv = cfg.model.conv_layers[0];
        cfg.model.conv_layers = vec![base_conv; conv_count];
        cfg.model.stacked_capsule_layers = vec![RoutingCapsuleConfig::default(); stack_count];

        let m = &mut cfg.model;
        for e in &entries {
            match e.key {
                "dataset" | "conv.count" | "stack.count" => {}
                "data.dir" => cfg.data_dir = Some(PathBuf::from(e.value)),
                "data.train_limit" => cfg.train_limit = e.limit()?,
                "data.val_limit" => cfg.val_limit = e.limit()?,
                "data.crop" => {
                    cfg.train.augmentation = match e.parse::<usize>()? {
                        0 => AugmentationConfig::default(),
                        n => AugmentationConfig::crop(n),
                    }
                }
                "seed" => m.seed = e.parse()?,
                "nota" => m.nota = parse_bool(e)?,
                "activation" => {
                    m.activation = Activation::parse(e.value).ok_or_else(|| e.bad("expected squash or custom"))?
                }
                "primary.num_types" => m.primary.num_capsule_types = e.parse()?,
                "primary.dim" => m.primary.capsule_dim = e.parse()?,
                "primary.kernel" => m.primary.kernel = e.parse()?,
                "primary.stride" => m.primary.stride = e.parse()?,
                "output.dim" => m.output.out_dim = e.parse()?,
                "output.iterations" => m.output.routing_iterations = e.parse()?,
                "loss.m_plus" => m.loss.m_plus = e.parse()?,
                "loss.m_minus" => m.loss.m_minus = e.parse()?,
                "loss.lambda" => m.loss.lambda_down = e.parse()?,
                "loss.recon_scale" => m.loss.reconstruction_scale = e.parse()?,
                "decoder.hidden" => m.decoder.hidden = parse_list(e)?,
                "train.epochs" => cfg.train.epochs = e.parse()?,
                "train.batch_size" => cfg.train.batch_size = e.parse()?,
                "train.lr" => cfg.train.adam.lr = e.parse()?,
                "train.beta1" => cfg.train.adam.beta1 = e.parse()?,
                "train.beta2" => cfg.train.adam.beta2 = e.parse()?,
                "train.eps" => cfg.train.adam.eps = e.parse()?,
                key => {
                    if let Some((i, field)) = indexed(key, "conv") {
                        let layer = m.conv_layers.get_mut(i).ok_or_else(|| e.unknown())?;
                        match field {
                            "filters" => layer.filters = e.parse()?,
                            "kernel" => layer.kernel = e.parse()?,
                            "stride" => layer.stride = e.parse()?,
                            _ => return Err(e.unknown()),
                        }
                    } else if let Some((i, field)) = indexed(key, "stack") {
                        let layer = m.stacked_capsule_layers.get_mut(i).ok_or_else(|| e.unknown())?;
                        match field {
                            "capsules" => layer.num_out_capsules = e.parse()?,
                            "dim" => layer.out_dim = e.parse()?,
                            "iterations" => layer.routing_iterations = e.parse()?,
                            _ => return Err(e.unknown()),
                        }
                    } else {
                        return Err(e.unknown());
                    }
                }
            }
        }
        cfg.sync_derived();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Recomputes the input shape, decoder output and class capsule count.
    pub fn sync_derived(&mut self) {
        let mut input = self.dataset.input();
        if let Some(c) = self.train.augmentation.active_crop() {
            input.height = input.height.min(c);
            input.width = input.width.min(c);
        }
        let m = &mut self.model;
        m.input = input;
        m.num_classes = 10;
        m.decoder.output_dim = input.pixels();
        m.output.num_out_capsules = m.num_classes + usize::from(m.nota);
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Canonical text listing every key; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset", &self.dataset.name());
        if let Some(dir) = &self.data_dir {
            kv("data.dir", &dir.display());
        }
        kv("data.train_limit", &self.train_limit.unwrap_or(0));
        kv("data.val_limit", &self.val_limit.unwrap_or(0));
        kv("data.crop", &self.train.augmentation.active_crop().unwrap_or(0));
        kv("seed", &m.seed);
        kv("nota", &m.nota);
        kv("activation", &m.activation.name());
        kv("conv.count", &m.conv_layers.len());
        for (
            i,
            ConvLayerConfig {
                filters,
                kernel,
                stride,
            },
        ) in m.conv_layers.iter().enumerate()
        {
            kv(&format!("conv.{i}.filters"), filters);
            kv(&format!("conv.{i}.kernel"), kernel);
            kv(&format!("conv.{i}.stride"), stride);
        }
        kv("primary.num_types", &m.primary.num_capsule_types);
        kv("primary.dim", &m.primary.capsule_dim);
        kv("primary.kernel", &m.primary.kernel);
        kv("primary.stride", &m.primary.stride);
        kv("stack.count", &m.stacked_capsule_layers.len());
        for (i, l) in m.stacked_capsule_layers.iter().enumerate() {
            kv(&format!("stack.{i}.capsules"), &l.num_out_capsules);
            kv(&format!("stack.{i}.dim"), &l.out_dim);
            kv(&format!("stack.{i}.iterations"), &l.routing_iterations);
        }
        kv("output.dim", &m.output.out_dim);
        kv("output.iterations", &m.output.routing_iterations);
        kv("loss.m_plus", &m.loss.m_plus);
        kv("loss.m_minus", &m.loss.m_minus);
        kv("loss.lambda", &m.loss.lambda_down);
        kv("loss.recon_scale", &m.loss.reconstruction_scale);
        let hidden: Vec<String> = m.decoder.hidden.iter().map(usize::to_string).collect();
        kv("decoder.hidden", &hidden.join(","));
        kv("train.epochs", &self.train.epochs);
        kv("train.batch_size", &self.train.batch_size);
        kv("train.lr", &self.train.adam.lr);
        kv("train.beta1", &self.train.adam.beta1);
        kv("train.beta2", &self.train.adam.beta2);
        kv("train.eps", &self.train.adam.eps);
        s
    }
}
