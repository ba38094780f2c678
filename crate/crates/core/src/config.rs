//! Declarative run configuration, one TOML section per stage. Unknown keys
//! are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, EstimatorTrainConfig};
use crate::mdm::{ModelConfig, TrainConfig};
use crate::sampler::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiDataConfig {
    pub samples_per_puzzle: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl Default for MiDataConfig {
    fn default() -> Self {
        Self {
            samples_per_puzzle: 4,
            t_min: 0.0,
            t_max: 1.0,
            seed: 0,
        }
    }
}

/// Estimator architecture minus the input width, which always comes from
/// the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorArch {
    pub proj_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for EstimatorArch {
    fn default() -> Self {
        let c = EstimatorConfig::for_input_dim(1);
        Self {
            proj_dim: c.proj_dim,
            hidden: c.hidden,
            seed: c.seed,
        }
    }
}

impl EstimatorArch {
    pub fn with_input_dim(&self, input_dim: usize) -> EstimatorConfig {
        EstimatorConfig {
            input_dim,
            proj_dim: self.proj_dim,
            hidden: self.hidden,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub mdm: Option<PathBuf>,
    pub estimator: Option<PathBuf>,
    pub puzzles: Option<PathBuf>,
    /// Training-split puzzle file; benchmark puzzles must not appear in it.
    pub exclude: Option<PathBuf>,
    /// Restricts `puzzles` to one split of its split manifest.
    pub split: Option<String>,
    pub seed: u64,
    pub samplers: Vec<SamplerConfig>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mi_data: MiDataConfig,
    pub estimator: EstimatorArch,
    pub estimator_train: EstimatorTrainConfig,
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fully resolved configuration, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Usage(m) => Error::Config(m),
            other => other,
        };
        self.model.validate().map_err(as_config)?;
        self.estimator
            .with_input_dim(self.model.dim)
            .validate()
            .map_err(as_config)?;
        for s in &self.benchmark.samplers {
            s.validate().map_err(as_config)?;
        }
        let d = &self.mi_data;
        if !(0.0 <= d.t_min && d.t_min <= d.t_max && d.t_max <= 1.0) {
            return Err(Error::Config(format!(
                "mi_data t range [{}, {}] invalid",
                d.t_min, d.t_max
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Strategy;

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            [model]
            dim = 32
            layers = 3

            [train]
            epochs = 2

            [[benchmark.samplers]]
            strategy = "mi_guided"
            gamma = 0.5
            lambda = 2.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.model.heads, ModelConfig::sudoku4().heads);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.benchmark.samplers[0].strategy, Strategy::MiGuided);
        assert_eq!(cfg.benchmark.samplers[0].k, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[model]\nwidth = 3", "[train]\nepoch = 3", "[nope]\n"] {
            assert!(
                matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let r = RunConfig::from_toml_str("[model]\ndim = 30\nheads = 4");
        assert!(matches!(r, Err(Error::Config(_))));
        let r = RunConfig::from_toml_str("[[benchmark.samplers]]\nstrategy = \"naive_k\"\nk = 0");
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }
}
