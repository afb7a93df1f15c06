//! Experiment configuration: strict JSON, validated at load and resolved so
//! every default is explicit.

use std::path::Path;

use pcml_core::bench::{self, ArmConfig, BenchmarkProblem, ModelSpec};
use pcml_core::train::TrainConfig;
use pcml_core::uq::ViConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_OUTPUT_DIR: &str = "pcml-out";
pub const SEED_ENV: &str = "PCML_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid value for {field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub name: String,
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub n_test: Option<usize>,
}

/// Variational inference settings; the run seed drives the sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UqConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub samples_per_step: usize,
    pub band_samples: usize,
    pub beta: f64,
    pub init_log_sigma: f64,
}

impl Default for UqConfig {
    fn default() -> Self {
        let vi = ViConfig::default();
        Self {
            enabled: false,
            epochs: vi.epochs,
            learning_rate: vi.learning_rate,
            samples_per_step: vi.samples_per_step,
            band_samples: vi.band_samples,
            beta: vi.beta,
            init_log_sigma: vi.init_log_sigma,
        }
    }
}

impl UqConfig {
    pub fn vi(&self, seed: u64) -> ViConfig {
        ViConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            samples_per_step: self.samples_per_step,
            band_samples: self.band_samples,
            beta: self.beta,
            init_log_sigma: self.init_log_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub ml: ArmConfig,
    pub pcml: ArmConfig,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            ml: ArmConfig::standalone_ml(),
            pcml: ArmConfig::pcml(),
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub uq: UqConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub compare: CompareConfig,
}

fn check_model(field: &str, m: &ModelSpec) -> Result<(), ConfigError> {
    if m.hidden.iter().any(|&w| w == 0) {
        return Err(ConfigError::invalid(&format!("{field}.hidden"), "layer widths must be positive"));
    }
    if !(m.ode_step > 0.0 && m.ode_step.is_finite()) {
        return Err(ConfigError::invalid(&format!("{field}.ode_step"), "must be positive"));
    }
    Ok(())
}

fn check_train(field: &str, t: &TrainConfig) -> Result<(), ConfigError> {
    t.validate()
        .map_err(|e| ConfigError::invalid(field, e.to_string()))
}

fn check_vi(field: &str, v: &ViConfig) -> Result<(), ConfigError> {
    v.validate().map_err(|e| ConfigError::invalid(field, e.to_string()))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn problem(&self) -> Result<BenchmarkProblem, ConfigError> {
        let mut prob = bench::problem_by_name(&self.problem.name)
            .map_err(|e| ConfigError::invalid("problem.name", e.to_string()))?;
        if let Some(s) = self.problem.noise_sigma {
            prob = prob.with_noise_sigma(s);
        }
        let n_train = self.problem.n_train.unwrap_or(prob.split.n_train);
        let n_test = self.problem.n_test.unwrap_or(prob.split.n_test);
        Ok(prob.with_split(n_train, n_test))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.problem()?;
        if let Some(s) = self.problem.noise_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(ConfigError::invalid("problem.noise_sigma", "must be finite and non-negative"));
            }
        }
        if self.problem.n_train == Some(0) {
            return Err(ConfigError::invalid("problem.n_train", "must be at least 1"));
        }
        if self.problem.n_test == Some(0) {
            return Err(ConfigError::invalid("problem.n_test", "must be at least 1"));
        }
        check_model("model", &self.model)?;
        check_train("train", &self.train)?;
        check_vi("uq", &self.uq.vi(0))?;
        if self.seeds.is_empty() {
            return Err(ConfigError::invalid("seeds", "at least one seed is required"));
        }
        for (name, arm) in [("compare.ml", &self.compare.ml), ("compare.pcml", &self.compare.pcml)] {
            check_model(&format!("{name}.model"), &arm.model)?;
            check_train(&format!("{name}.train"), &arm.train)?;
            if let Some(vi) = &arm.vi {
                check_vi(&format!("{name}.vi"), vi)?;
            }
        }
        if self.compare.ml.name == self.compare.pcml.name {
            return Err(ConfigError::invalid("compare", "arm names must differ"));
        }
        Ok(())
    }

    /// Copy with problem defaults written out explicitly.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if let Ok(prob) = bench::problem_by_name(&self.problem.name) {
            let sigma = prob.noise.sigma.iter().copied().fold(0.0, f64::max);
            out.problem.noise_sigma.get_or_insert(sigma);
            out.problem.n_train.get_or_insert(prob.split.n_train);
            out.problem.n_test.get_or_insert(prob.split.n_test);
        }
        out.output_dir.get_or_insert_with(|| DEFAULT_OUTPUT_DIR.to_string());
        out
    }

    /// The single-model arm described by `model`, `train` and `uq`.
    pub fn arm(&self) -> ArmConfig {
        ArmConfig {
            name: format!("{:?}", self.train.mode).to_lowercase(),
            model: self.model.clone(),
            train: self.train.clone(),
            vi: self.uq.enabled.then(|| self.uq.vi(0)),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ExperimentConfig::from_json(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Env,
    Config,
}

/// Seeds to run: `--seed` flag, then the environment, then the config.
pub fn resolve_seeds(
    cfg: &ExperimentConfig,
    flag: Option<u64>,
    env: Option<&str>,
) -> Result<(Vec<u64>, SeedSource), ConfigError> {
    if let Some(s) = flag {
        return Ok((vec![s], SeedSource::Flag));
    }
    if let Some(raw) = env {
        let s = raw
            .trim()
            .parse::<u64>()
            .map_err(|_| ConfigError::invalid(SEED_ENV, format!("not an unsigned integer: {raw:?}")))?;
        return Ok((vec![s], SeedSource::Env));
    }
    Ok((cfg.seeds.clone(), SeedSource::Config))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"problem": {"name": "mixer"}, "train": {"mode": "hard_sequential"}}"#;

    #[test]
    fn minimal_config_gets_explicit_defaults() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.problem.n_train, Some(40));
        assert_eq!(cfg.problem.noise_sigma, Some(0.01));
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.output_dir.as_deref(), Some(DEFAULT_OUTPUT_DIR));
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = ExperimentConfig::from_json("{\n \"problem\": {\"name\": \"mixer\"},\n \"tarin\": {}\n}").unwrap_err();
        match err {
            ConfigError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn negative_learning_rate_names_the_field() {
        let err = ExperimentConfig::from_json(r#"{"problem": {"name": "mixer"}, "train": {"learning_rate": -1.0}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.seeds = vec![4, 5];
        assert_eq!(resolve_seeds(&cfg, Some(1), Some("2")).unwrap(), (vec![1], SeedSource::Flag));
        assert_eq!(resolve_seeds(&cfg, None, Some("2")).unwrap(), (vec![2], SeedSource::Env));
        assert_eq!(resolve_seeds(&cfg, None, None).unwrap(), (vec![4, 5], SeedSource::Config));
        assert!(resolve_seeds(&cfg, None, Some("x")).is_err());
    }
}
