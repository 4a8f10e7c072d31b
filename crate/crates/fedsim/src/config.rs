//! JSON experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use fedsim_core::aggregation::LambdaInit;
use fedsim_core::model::{OptimizerKind, OptimizerSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{FedsimError, Result};

pub const DEFAULT_PROXY_PER_CLASS: usize = 10;
pub const DEFAULT_PROX_MU: f64 = 0.01;
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedavg,
    Fedhaw,
    Fedlaw,
    Fedprox,
    FedproxHaw,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Fedavg,
        Method::Fedhaw,
        Method::Fedlaw,
        Method::Fedprox,
        Method::FedproxHaw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fedavg => "fedavg",
            Method::Fedhaw => "fedhaw",
            Method::Fedlaw => "fedlaw",
            Method::Fedprox => "fedprox",
            Method::FedproxHaw => "fedprox_haw",
        }
    }

    /// Aggregates with hypergradient-updated coefficients.
    pub fn is_haw(self) -> bool {
        matches!(self, Method::Fedhaw | Method::FedproxHaw)
    }

    /// Clients train with the proximal term.
    pub fn is_prox(self) -> bool {
        matches!(self, Method::Fedprox | Method::FedproxHaw)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    SgdWd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerName,
    pub eta: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

/// Gaussian-cluster classification data generated in-process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaInitName {
    #[default]
    ShardFraction,
    LogShardFraction,
    Uniform,
}

impl From<LambdaInitName> for LambdaInit {
    fn from(name: LambdaInitName) -> Self {
        match name {
            LambdaInitName::ShardFraction => LambdaInit::ShardFraction,
            LambdaInitName::LogShardFraction => LambdaInit::LogShardFraction,
            LambdaInitName::Uniform => LambdaInit::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedAvgWeighting {
    #[default]
    ShardSize,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Directory holding the four raw IDX files. Relative paths are taken
    /// from the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mnist_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Hidden layer widths of the MLP.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "E")]
    pub e: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub method: Method,
    #[serde(rename = "D_alpha")]
    pub d_alpha: f64,
    #[serde(default)]
    pub p_e: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prox_mu: Option<f64>,
    #[serde(default = "default_proxy_per_class")]
    pub proxy_per_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_lr: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub lambda_init: LambdaInitName,
    #[serde(default)]
    pub fedavg_weights: FedAvgWeighting,
    /// Smallest acceptable shard; defaults to twice the batch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_per_client: Option<usize>,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_proxy_per_class() -> usize {
    DEFAULT_PROXY_PER_CLASS
}

fn default_eval_every() -> usize {
    1
}

/// Pulls the backticked field name out of a serde message such as
/// "missing field `T`".
fn field_from_serde(message: &str) -> Option<String> {
    if !(message.starts_with("missing field") || message.starts_with("unknown field")) {
        return None;
    }
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_owned())
}

impl ExperimentConfig {
    /// Parses and validates a config. Relative `mnist_dir` values are
    /// resolved against `base_dir`.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut config: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let message = e.to_string();
            FedsimError::Schema {
                field: field_from_serde(&message),
                message,
            }
        })?;
        if let (Some(dir), Some(base)) = (config.mnist_dir.as_mut(), base_dir) {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        config.validate()?;
        Ok(config.resolved())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FedsimError::io(path, e))?;
        ExperimentConfig::from_json(&text, path.parent())
    }

    /// Fills method-dependent defaults so that the stored config says
    /// exactly what runs.
    fn resolved(mut self) -> Self {
        if self.method.is_prox() && self.prox_mu.is_none() {
            self.prox_mu = Some(DEFAULT_PROX_MU);
        }
        if self.min_per_client.is_none() {
            self.min_per_client = Some(2 * self.batch_size);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        fn err(field: &str, message: impl Into<String>) -> FedsimError {
            FedsimError::schema(field, message)
        }
        match self.dataset {
            DatasetKind::Mnist => {
                if self.mnist_dir.is_none() {
                    return Err(err("mnist_dir", "required when dataset is \"mnist\""));
                }
                if self.synthetic.is_some() {
                    return Err(err(
                        "synthetic",
                        "only allowed when dataset is \"synthetic\"",
                    ));
                }
            }
            DatasetKind::Synthetic => {
                let Some(s) = &self.synthetic else {
                    return Err(err("synthetic", "required when dataset is \"synthetic\""));
                };
                if self.mnist_dir.is_some() {
                    return Err(err("mnist_dir", "only allowed when dataset is \"mnist\""));
                }
                if s.num_classes < 2 || s.input_dim < 1 {
                    return Err(err(
                        "synthetic",
                        "needs num_classes >= 2 and input_dim >= 1",
                    ));
                }
                if s.train_per_class < 1 || s.test_per_class < 1 {
                    return Err(err("synthetic", "per-class sample counts must be positive"));
                }
                if !(s.spread >= 0.0) || !s.spread.is_finite() {
                    return Err(err(
                        "synthetic",
                        "spread must be a finite non-negative number",
                    ));
                }
            }
        }
        if self.hidden.contains(&0) {
            return Err(err("hidden", "layer widths must be positive"));
        }
        if self.k < 1 {
            return Err(err("K", "at least one client is required"));
        }
        if self.batch_size < 1 {
            return Err(err("batch_size", "must be at least 1"));
        }
        if self.eval_every < 1 {
            return Err(err("eval_every", "must be at least 1"));
        }
        if !(self.d_alpha > 0.0) || !self.d_alpha.is_finite() {
            return Err(err("D_alpha", "must be a finite positive number"));
        }
        if !(0.0..=1.0).contains(&self.p_e) {
            return Err(err("p_e", "must lie in [0, 1]"));
        }
        if !(self.optimizer.eta > 0.0) || !self.optimizer.eta.is_finite() {
            return Err(err("optimizer", "eta must be a finite positive number"));
        }
        self.optimizer_spec()
            .validate()
            .map_err(|e| err("optimizer", e.to_string()))?;

        let haw = self.method.is_haw();
        for (name, value) in [
            ("eta_gamma", self.eta_gamma),
            ("eta_lambda", self.eta_lambda),
        ] {
            match value {
                None if haw => {
                    return Err(err(name, format!("required for method {}", self.method)))
                }
                Some(_) if !haw => {
                    return Err(err(name, format!("not used by method {}", self.method)))
                }
                Some(v) if !(v >= 0.0) || !v.is_finite() => {
                    return Err(err(name, "must be a finite non-negative number"))
                }
                _ => {}
            }
        }

        let law = self.method == Method::Fedlaw;
        match (self.proxy_epochs, law) {
            (None, true) => return Err(err("proxy_epochs", "required for method fedlaw")),
            (Some(_), false) => {
                return Err(err(
                    "proxy_epochs",
                    format!("not used by method {}", self.method),
                ))
            }
            _ => {}
        }
        match (self.proxy_lr, law) {
            (None, true) => return Err(err("proxy_lr", "required for method fedlaw")),
            (Some(_), false) => {
                return Err(err(
                    "proxy_lr",
                    format!("not used by method {}", self.method),
                ))
            }
            (Some(lr), true) if !(lr > 0.0) || !lr.is_finite() => {
                return Err(err("proxy_lr", "must be a finite positive number"))
            }
            _ => {}
        }
        if law && self.proxy_per_class < 1 {
            return Err(err(
                "proxy_per_class",
                "fedlaw needs at least one proxy sample per class",
            ));
        }

        match self.prox_mu {
            Some(mu) if !(mu >= 0.0) || !mu.is_finite() => {
                return Err(err("prox_mu", "must be a finite non-negative number"))
            }
            Some(mu) if mu != 0.0 && !self.method.is_prox() => {
                return Err(err(
                    "prox_mu",
                    format!("not used by method {}", self.method),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Client optimizer including the proximal strength of this method.
    pub fn optimizer_spec(&self) -> OptimizerSpec {
        let o = &self.optimizer;
        let kind = match o.kind {
            OptimizerName::Sgd => OptimizerKind::Sgd,
            OptimizerName::SgdWd => OptimizerKind::SgdWd,
            OptimizerName::Adam => OptimizerKind::Adam,
        };
        let mu = if self.method.is_prox() {
            self.prox_mu.unwrap_or(DEFAULT_PROX_MU)
        } else {
            0.0
        };
        OptimizerSpec {
            kind,
            eta: o.eta,
            weight_decay: o.weight_decay,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_eps: o.adam_eps,
            prox_mu: mu,
        }
    }

    pub fn min_per_client(&self) -> usize {
        self.min_per_client.unwrap_or(2 * self.batch_size)
    }

    /// Compact JSON with object keys sorted at every level.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes to JSON");
        let mut out = String::new();
        write_canonical(&value, &mut out);
        out
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
