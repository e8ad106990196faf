//! The declarative run file: one TOML document with a section per module.
//!
//! ```toml
//! [data]
//! domain = "movie"
//! train = "out/train.examples.jsonl"
//! test = "out/test.examples.jsonl"
//! catalog = "out/catalog.json"
//!
//! [train]
//! epochs = 2
//!
//! [federation]
//! total_rounds = 16
//! ```
//!
//! Every section and field is optional and falls back to the documented
//! default. Unknown keys are rejected. Relative paths are resolved against
//! the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eval::{Averaging, LocalOnlyConfig, DEFAULT_K_PREDICT};
use crate::federation::FederationConfig;
use crate::learner::{AdapterConfig, TrainConfig};
use crate::prompt::Domain;
use crate::synth::SynthConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `movie` or `recipe`.
    pub domain: String,
    pub train: Option<PathBuf>,
    /// Train examples plus synthetic ones, for the `+Syn` rows.
    pub augmented: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domain: "movie".into(),
            train: None,
            augmented: None,
            test: None,
            catalog: None,
        }
    }
}

impl DataConfig {
    pub fn domain(&self) -> Result<Domain, ConfigError> {
        domain_by_name(&self.domain).ok_or_else(|| {
            invalid(
                "data.domain",
                format!("expected `movie` or `recipe`, got `{}`", self.domain),
            )
        })
    }

    pub fn require<'a>(
        &self,
        field: &str,
        value: &'a Option<PathBuf>,
    ) -> Result<&'a Path, ConfigError> {
        value
            .as_deref()
            .ok_or_else(|| invalid(&format!("data.{field}"), "required for this command"))
    }
}

pub fn domain_by_name(name: &str) -> Option<Domain> {
    match name {
        "movie" => Some(Domain::movie()),
        "recipe" => Some(Domain::recipe()),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_predict: usize,
    pub averaging: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_predict: DEFAULT_K_PREDICT,
            averaging: Averaging::Micro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub federation: FederationConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub local: LocalOnlyConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses, validates and resolves data paths against the file's folder.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.train,
            &mut cfg.data.augmented,
            &mut cfg.data.test,
            &mut cfg.data.catalog,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.data.domain()?;
        if self.adapter.rank == 0 {
            return Err(invalid("adapter.rank", "must be at least 1"));
        }
        if !(self.adapter.init_std >= 0.0 && self.adapter.init_std.is_finite()) {
            return Err(invalid(
                "adapter.init_std",
                "must be a finite non-negative number",
            ));
        }
        if !self.adapter.alpha.is_finite() {
            return Err(invalid("adapter.alpha", "must be finite"));
        }
        self.train
            .validate()
            .map_err(|e| field_error("train", e.to_string()))?;
        self.federation
            .validate()
            .map_err(|e| field_error("federation", e.to_string()))?;
        if self.federation.total_rounds == 0 {
            return Err(invalid("federation.total_rounds", "must be at least 1"));
        }
        self.synth.validate().map_err(|e| field_error("synth", e))?;
        if self.eval.k_predict == 0 {
            return Err(invalid("eval.k_predict", "must be at least 1"));
        }
        if self.local.n_users == 0 {
            return Err(invalid("local.n_users", "must be at least 1"));
        }
        Ok(())
    }
}

/// Splits a component message of the form `...section.field ...` into a
/// field-tagged error.
fn field_error(section: &str, message: String) -> ConfigError {
    let prefix = format!("{section}.");
    let field = message
        .split(|c: char| c.is_whitespace() || c == '/')
        .find(|w| w.starts_with(&prefix))
        .map(|w| {
            w.trim_end_matches(|c: char| !c.is_alphanumeric() && c != '_')
                .to_string()
        })
        .unwrap_or_else(|| section.to_string());
    ConfigError::Invalid { field, message }
}
