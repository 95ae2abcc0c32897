//! Experiment configuration.
//!
//! Configs are TOML: flat top-level keys, a `[dataset]` table and one
//! `[[client]]` block per client. `key=value` overrides are applied to the
//! parsed document before it is typed, so overrides go through the same
//! validation as the file itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, ModelSpec};
pub use crate::protocol::{Method, StoreMode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override '{0}': expected key=value")]
    Override(String),
    #[error("{field}: {constraint}")]
    Invalid { field: String, constraint: String },
}

fn invalid(field: impl Into<String>, constraint: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        constraint: constraint.into(),
    }
}

fn default_batch_size() -> usize {
    32
}
fn default_inner_epochs() -> usize {
    3
}
fn default_alpha() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.001
}
fn default_n_public() -> usize {
    10
}
fn default_public_fraction() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationName {
    #[default]
    Relu,
    Tanh,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::Relu => Activation::Relu,
            ActivationName::Tanh => Activation::Tanh,
        }
    }
}

/// One `[[client]]` block: hidden widths only; input and output widths come
/// from the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpecConfig {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: ActivationName,
    #[serde(default)]
    pub dropout: f64,
}

impl ClientSpecConfig {
    pub fn model_spec(
        &self,
        input_dim: usize,
        classes: usize,
    ) -> Result<ModelSpec, crate::nn::NnError> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(input_dim);
        widths.extend(&self.hidden);
        widths.push(classes);
        ModelSpec::new(widths, self.activation.into(), self.dropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        input_dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_true")]
        subtract_mean: bool,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        /// Use only the first `limit` training samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
        /// Samples held out for testing when no test files are given.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_count: Option<usize>,
        #[serde(default = "default_true")]
        subtract_mean: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Number of clients `K`.
    pub clients: usize,
    pub seed: u64,
    /// Server events for asynchronous methods, synchronous rounds otherwise.
    pub rounds: u64,
    /// Optional simulated-time cut-off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_inner_epochs")]
    pub inner_epochs: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub store_mode: StoreMode,
    /// Simulated seconds between evaluation rows.
    pub eval_every: f64,
    #[serde(default = "default_n_public")]
    pub n_public: usize,
    #[serde(default = "default_public_fraction")]
    pub public_fraction: f64,
    /// When false, FedHe clients neither upload nor receive logits.
    #[serde(default = "default_true")]
    pub logit_exchange: bool,
    /// Record the FedAvg global model's training loss after every round.
    #[serde(default)]
    pub track_global_loss: bool,
    /// Simulated seconds per client round; all 1.0 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speeds: Option<Vec<f64>>,
    pub dataset: DatasetConfig,
    #[serde(rename = "client", default)]
    pub client_specs: Vec<ClientSpecConfig>,
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key=value` overrides; dotted keys address nested tables.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::Override(item.clone()))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::Override(item.clone()));
        }
        let mut current = &mut *table;
        for part in &path[..path.len() - 1] {
            current = current
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ConfigError::Override(item.clone()))?;
        }
        current.insert(
            path[path.len() - 1].to_string(),
            parse_override_value(value.trim()),
        );
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Speeds with the all-ones default filled in.
    pub fn client_speeds(&self) -> Vec<f64> {
        self.speeds
            .clone()
            .unwrap_or_else(|| vec![1.0; self.clients])
    }

    pub fn class_count(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic { classes, .. } => Some(*classes),
            DatasetConfig::Idx { .. } => None,
        }
    }

    /// Makes relative dataset paths absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Idx {
            images,
            labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            for p in [
                Some(images),
                Some(labels),
                test_images.as_mut(),
                test_labels.as_mut(),
            ]
            .into_iter()
            .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    /// Client indices whose spec differs from client 0's.
    pub fn heterogeneous_clients(&self) -> Vec<usize> {
        self.client_specs
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, s)| *s != &self.client_specs[0])
            .map(|(k, _)| k)
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.clients == 0 {
            return Err(invalid("clients", "must be at least 1"));
        }
        if self.client_specs.len() != self.clients {
            return Err(invalid(
                "client",
                format!(
                    "clients = {} but {} [[client]] blocks given; lengths must match",
                    self.clients,
                    self.client_specs.len()
                ),
            ));
        }
        if let Some(speeds) = &self.speeds {
            if speeds.len() != self.clients {
                return Err(invalid(
                    "speeds",
                    format!(
                        "clients = {} but {} speeds given; lengths must match",
                        self.clients,
                        speeds.len()
                    ),
                ));
            }
            if let Some((k, s)) = speeds
                .iter()
                .enumerate()
                .find(|(_, s)| !(s.is_finite() && **s > 0.0))
            {
                return Err(invalid(
                    format!("speeds[{k}]"),
                    format!("must be a positive number, got {s}"),
                ));
            }
        }
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be at least 1"));
        }
        if let Some(h) = self.horizon {
            if !(h.is_finite() && h > 0.0) {
                return Err(invalid("horizon", format!("must be positive, got {h}")));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.inner_epochs == 0 {
            return Err(invalid("inner_epochs", "must be at least 1"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(invalid(
                "alpha",
                format!("must be a non-negative number, got {}", self.alpha),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(self.eval_every.is_finite() && self.eval_every > 0.0) {
            return Err(invalid(
                "eval_every",
                format!("must be positive, got {}", self.eval_every),
            ));
        }
        if self.method == Method::FedMd {
            if self.n_public == 0 {
                return Err(invalid("n_public", "must be at least 1 for fedmd"));
            }
            if !(self.public_fraction > 0.0 && self.public_fraction < 1.0) {
                return Err(invalid(
                    "public_fraction",
                    format!("must lie in (0, 1), got {}", self.public_fraction),
                ));
            }
        }
        for (k, spec) in self.client_specs.iter().enumerate() {
            if spec.hidden.contains(&0) {
                return Err(invalid(
                    format!("client[{k}].hidden"),
                    "widths must be positive",
                ));
            }
            if !(0.0..1.0).contains(&spec.dropout) {
                return Err(invalid(
                    format!("client[{k}].dropout"),
                    format!("must lie in [0, 1), got {}", spec.dropout),
                ));
            }
        }
        if self.method == Method::FedAvg {
            let odd = self.heterogeneous_clients();
            if !odd.is_empty() {
                return Err(invalid(
                    "client",
                    format!("fedavg requires identical client specs; clients {odd:?} differ from client 0"),
                ));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                input_dim,
                train_per_class,
                test_per_class,
                ..
            } => {
                for (name, v) in [
                    ("dataset.classes", classes),
                    ("dataset.input_dim", input_dim),
                    ("dataset.train_per_class", train_per_class),
                    ("dataset.test_per_class", test_per_class),
                ] {
                    if *v == 0 {
                        return Err(invalid(name, "must be at least 1"));
                    }
                }
                if classes * train_per_class < self.clients {
                    return Err(invalid(
                        "dataset.train_per_class",
                        format!(
                            "{} training samples cannot cover {} clients",
                            classes * train_per_class,
                            self.clients
                        ),
                    ));
                }
            }
            DatasetConfig::Idx {
                test_images,
                test_labels,
                test_count,
                limit,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    return Err(invalid(
                        "dataset.test_images",
                        "test_images and test_labels must be given together",
                    ));
                }
                if test_images.is_none() && test_count.unwrap_or(0) == 0 {
                    return Err(invalid(
                        "dataset.test_count",
                        "must be positive when no test files are given",
                    ));
                }
                if *limit == Some(0) {
                    return Err(invalid("dataset.limit", "must be positive"));
                }
            }
        }
        Ok(())
    }
}
