//! Experiment configuration: JSON schema, defaults and validation.

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feedback::Strategy;
use crate::model::{make_covariance, CovarianceSpec, DataDistribution, Weights};

/// Default standardized-deviation threshold for analytic comparisons.
pub const DEFAULT_SIGMA_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("malformed config: {message}")]
    Parse { message: String },
    #[error("schema error at `{key}`: {message}")]
    Schema { key: String, message: String },
    #[error("constraint violated for `{key}`: {message}")]
    Constraint { key: String, message: String },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Parse { .. } => None,
            ConfigError::Schema { key, .. } | ConfigError::Constraint { key, .. } => Some(key),
        }
    }

    fn constraint(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Constraint {
            key: key.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Gram matrix and target sums only; O(d²) memory per trial.
    #[default]
    SufficientStats,
    /// Keep every dataset and refit on the stacked data.
    Materialized,
}

/// Covariance as written in a config. The isotropic case takes its size from `dim`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceConfig {
    #[default]
    Isotropic,
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl CovarianceConfig {
    pub fn to_spec(&self, dim: usize) -> Result<CovarianceSpec, ConfigError> {
        match self {
            CovarianceConfig::Isotropic => Ok(CovarianceSpec::Isotropic(dim)),
            CovarianceConfig::Diagonal(v) => {
                if v.len() != dim {
                    return Err(ConfigError::constraint(
                        "covariance",
                        format!("diagonal has {} entries, expected dim = {dim}", v.len()),
                    ));
                }
                Ok(CovarianceSpec::Diagonal(v.clone()))
            }
            CovarianceConfig::Full(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(ConfigError::constraint(
                        "covariance",
                        format!("full covariance must be {dim}x{dim}"),
                    ));
                }
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                Ok(CovarianceSpec::Full(DMatrix::from_row_slice(dim, dim, &flat)))
            }
        }
    }
}

fn default_sigma_threshold() -> f64 {
    DEFAULT_SIGMA_THRESHOLD
}

/// Parameters of one linear-regression feedback-loop experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub dim: usize,
    pub samples_per_iter: usize,
    pub noise_std: f64,
    pub iterations: usize,
    pub trials: usize,
    pub root_seed: u64,
    #[serde(default)]
    pub covariance: CovarianceConfig,
    #[serde(default)]
    pub execution_mode: ExecutionMode,
    #[serde(default)]
    pub fresh_covariates: bool,
    #[serde(default)]
    pub ridge_lambda: Option<f64>,
    #[serde(default = "default_sigma_threshold")]
    pub sigma_threshold: f64,
    /// w*; defaults to the unit-norm vector with equal entries.
    #[serde(default)]
    pub true_weights: Option<Vec<f64>>,
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn new(
        strategy: Strategy,
        dim: usize,
        samples_per_iter: usize,
        noise_std: f64,
        iterations: usize,
        trials: usize,
        root_seed: u64,
    ) -> Self {
        Self {
            strategy,
            dim,
            samples_per_iter,
            noise_std,
            iterations,
            trials,
            root_seed,
            covariance: CovarianceConfig::Isotropic,
            execution_mode: ExecutionMode::SufficientStats,
            fresh_covariates: false,
            ridge_lambda: None,
            sigma_threshold: DEFAULT_SIGMA_THRESHOLD,
            true_weights: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.dim < 1 {
            return Err(ConfigError::constraint("dim", "dim must be at least 1"));
        }
        if self.samples_per_iter < self.dim {
            return Err(ConfigError::constraint(
                "samples_per_iter",
                format!(
                    "samples_per_iter ({}) must be at least dim ({})",
                    self.samples_per_iter, self.dim
                ),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(ConfigError::constraint("noise_std", "noise_std must be finite and >= 0"));
        }
        if self.iterations < 1 {
            return Err(ConfigError::constraint("iterations", "iterations must be at least 1"));
        }
        if self.trials < 1 {
            return Err(ConfigError::constraint("trials", "trials must be at least 1"));
        }
        if let Some(l) = self.ridge_lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(ConfigError::constraint("ridge_lambda", "ridge_lambda must be > 0"));
            }
        }
        if !(self.sigma_threshold.is_finite() && self.sigma_threshold > 0.0) {
            return Err(ConfigError::constraint("sigma_threshold", "sigma_threshold must be > 0"));
        }
        if let Some(w) = &self.true_weights {
            if w.len() != self.dim {
                return Err(ConfigError::constraint(
                    "true_weights",
                    format!("true_weights has {} entries, expected dim = {}", w.len(), self.dim),
                ));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(ConfigError::constraint("true_weights", "entries must be finite"));
            }
        }
        make_covariance(&self.covariance.to_spec(self.dim)?)
            .map_err(|e| ConfigError::constraint("covariance", e.to_string()))?;
        Ok(())
    }

    /// Checks the preconditions of the closed-form test-error laws.
    pub fn check_analytic(&self) -> Result<(), ConfigError> {
        if self.samples_per_iter < self.dim + 2 {
            return Err(ConfigError::constraint(
                "samples_per_iter",
                format!(
                    "analytic laws require T >= d + 2 (samples_per_iter = {}, dim = {})",
                    self.samples_per_iter, self.dim
                ),
            ));
        }
        if self.covariance != CovarianceConfig::Isotropic {
            return Err(ConfigError::constraint(
                "covariance",
                "analytic laws are stated for isotropic covariance only",
            ));
        }
        if self.fresh_covariates {
            return Err(ConfigError::constraint(
                "fresh_covariates",
                "analytic laws assume the design is shared across iterations",
            ));
        }
        if self.ridge_lambda.is_some() {
            return Err(ConfigError::constraint(
                "ridge_lambda",
                "no analytic curve exists for ridge fits",
            ));
        }
        Ok(())
    }

    pub fn analytic_available(&self) -> bool {
        self.check_analytic().is_ok()
    }

    pub fn true_weights(&self) -> Vec<f64> {
        match &self.true_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / (self.dim as f64).sqrt(); self.dim],
        }
    }

    pub fn distribution(&self) -> Result<DataDistribution, ConfigError> {
        let cov = make_covariance(&self.covariance.to_spec(self.dim)?)
            .map_err(|e| ConfigError::constraint("covariance", e.to_string()))?;
        let w = Weights::from_slice(&self.true_weights())
            .map_err(|e| ConfigError::constraint("true_weights", e.to_string()))?;
        DataDistribution::new(cov, w, self.noise_std)
            .map_err(|e| ConfigError::constraint("noise_std", e.to_string()))
    }

    /// The fully resolved config as pretty JSON; `parse_config` reads it back unchanged.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = parse_json(text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn default_alphabet() -> usize {
    8
}
fn default_order() -> usize {
    2
}
fn default_alpha() -> f64 {
    0.1
}
fn default_heldout() -> usize {
    10_000
}
fn default_zipf() -> f64 {
    1.5
}

/// Parameters of an n-gram feedback-loop ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NgramConfig {
    pub strategy: Strategy,
    #[serde(default = "default_alphabet")]
    pub alphabet_size: usize,
    #[serde(default = "default_order")]
    pub order: usize,
    pub tokens_per_iter: usize,
    pub iterations: usize,
    pub seeds: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_heldout")]
    pub heldout_tokens: usize,
    #[serde(default = "default_zipf")]
    pub zipf_exponent: f64,
    pub root_seed: u64,
}

impl NgramConfig {
    pub fn new(strategy: Strategy, tokens_per_iter: usize, iterations: usize, seeds: usize, root_seed: u64) -> Self {
        Self {
            strategy,
            alphabet_size: default_alphabet(),
            order: default_order(),
            tokens_per_iter,
            iterations,
            seeds,
            alpha: default_alpha(),
            heldout_tokens: default_heldout(),
            zipf_exponent: default_zipf(),
            root_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.alphabet_size < 2 {
            return Err(ConfigError::constraint("alphabet_size", "alphabet_size must be at least 2"));
        }
        if !(1..=2).contains(&self.order) {
            return Err(ConfigError::constraint("order", "order must be 1 or 2"));
        }
        if self.tokens_per_iter < self.order {
            return Err(ConfigError::constraint("tokens_per_iter", "tokens_per_iter must be >= order"));
        }
        if self.iterations < 1 {
            return Err(ConfigError::constraint("iterations", "iterations must be at least 1"));
        }
        if self.seeds < 1 {
            return Err(ConfigError::constraint("seeds", "seeds must be at least 1"));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ConfigError::constraint("alpha", "alpha must be > 0"));
        }
        if self.heldout_tokens < 2 {
            return Err(ConfigError::constraint("heldout_tokens", "heldout_tokens must be at least 2"));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return Err(ConfigError::constraint("zipf_exponent", "zipf_exponent must be >= 0"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub fn parse_ngram_config(text: &str) -> Result<NgramConfig, ConfigError> {
    let cfg: NgramConfig = parse_json(text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        let message = inner.to_string();
        match inner.classify() {
            serde_json::error::Category::Data => ConfigError::Schema {
                key: offending_key(&message).unwrap_or(path),
                message,
            },
            _ => ConfigError::Parse { message },
        }
    })?;
    Ok(value)
}

// serde reports unknown/missing fields by name in the message; the path then
// points at the enclosing object.
fn offending_key(message: &str) -> Option<String> {
    for prefix in ["unknown field `", "missing field `"] {
        if let Some(rest) = message.strip_prefix(prefix) {
            return rest.split('`').next().map(str::to_string);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"strategy":"accumulate","dim":10,"samples_per_iter":100,
        "noise_std":1.0,"iterations":10,"trials":1000,"root_seed":42}"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.strategy, Strategy::Accumulate);
        assert_eq!(cfg.execution_mode, ExecutionMode::SufficientStats);
        assert!(!cfg.fresh_covariates);
        assert_eq!(cfg.covariance, CovarianceConfig::Isotropic);
        assert_eq!(cfg.sigma_threshold, 4.0);
        assert_eq!(cfg.ridge_lambda, None);
        assert_eq!(cfg, ExperimentConfig::new(Strategy::Accumulate, 10, 100, 1.0, 10, 1000, 42));
    }

    #[test]
    fn too_few_samples_names_key() {
        let text = MINIMAL.replace("\"samples_per_iter\":100", "\"samples_per_iter\":5");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Constraint { .. }));
        assert_eq!(err.key(), Some("samples_per_iter"));
    }

    #[test]
    fn unknown_strategy_lists_allowed_values() {
        let text = MINIMAL.replace("\"accumulate\"", "\"halfway\"");
        let err = parse_config(&text).unwrap_err();
        let ConfigError::Schema { key, message } = &err else {
            panic!("expected schema error, got {err:?}");
        };
        assert_eq!(key, "strategy");
        for allowed in ["replace", "accumulate", "replace_multiple"] {
            assert!(message.contains(allowed), "{message}");
        }
    }

    #[test]
    fn unknown_key_and_wrong_type_are_schema_errors() {
        let text = MINIMAL.replace("\"trials\"", "\"trails\"");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }));
        assert_eq!(err.key(), Some("trails"));

        let text = MINIMAL.replace("\"dim\":10", "\"dim\":\"ten\"");
        let err = parse_config(&text).unwrap_err();
        assert!(matches!(err, ConfigError::Schema { .. }));
        assert_eq!(err.key(), Some("dim"));

        let text = MINIMAL.replace("\"root_seed\":42", "");
        let err = parse_config(&text.replace(",}", "}")).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. } | ConfigError::Schema { .. }));
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(parse_config("{\"dim\": 3,"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let mut cfg = ExperimentConfig::new(Strategy::ReplaceMultiple, 3, 12, 0.7, 5, 20, 9);
        cfg.covariance = CovarianceConfig::Full(vec![
            vec![2.0, 0.1, 0.0],
            vec![0.1, 1.0, 0.0],
            vec![0.0, 0.0, 0.3],
        ]);
        cfg.ridge_lambda = Some(1e-3);
        cfg.true_weights = Some(vec![0.1, 0.2, 0.3]);
        cfg.execution_mode = ExecutionMode::Materialized;
        assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn covariance_constraints() {
        let text = MINIMAL.replace("\"root_seed\":42", "\"root_seed\":42,\"covariance\":{\"diagonal\":[1.0]}");
        assert_eq!(parse_config(&text).unwrap_err().key(), Some("covariance"));
    }

    #[test]
    fn analytic_preconditions() {
        let cfg = ExperimentConfig::new(Strategy::Replace, 10, 11, 1.0, 3, 2, 0);
        cfg.validate().unwrap();
        let err = cfg.check_analytic().unwrap_err();
        assert_eq!(err.key(), Some("samples_per_iter"));
        assert!(err.to_string().contains("T >= d + 2"));
        let mut cfg = ExperimentConfig::new(Strategy::Replace, 10, 100, 1.0, 3, 2, 0);
        assert!(cfg.analytic_available());
        cfg.ridge_lambda = Some(0.5);
        assert!(!cfg.analytic_available());
    }

    #[test]
    fn ngram_defaults() {
        let cfg = parse_ngram_config(
            r#"{"strategy":"replace","tokens_per_iter":500,"iterations":20,"seeds":200,"root_seed":1}"#,
        )
        .unwrap();
        assert_eq!(cfg, NgramConfig::new(Strategy::Replace, 500, 20, 200, 1));
        assert_eq!(parse_ngram_config(&cfg.to_json()).unwrap(), cfg);
    }
}
