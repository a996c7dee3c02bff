//! Run configuration: one TOML document with per-module tables. Every
//! field has a default, so an empty file is a valid desk-scale setup;
//! CLI flags and the EVADE_OUT_DIR environment variable override the
//! file.

use std::path::{Path, PathBuf};

use evade_core::classical::{ForestConfig, LogisticConfig};
use evade_core::cvae::{CvaeConfig, CvaeSearchConfig};
use evade_core::distill::{DistillConfig, ProxyConfig};
use evade_core::representation::EncoderConfig;

/// Raised for malformed or invalid configuration; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub k_grid: Vec<usize>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            out_dir: PathBuf::from("runs"),
            seeds: vec![1],
            k_grid: evade_core::attack::default_k_grid(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: PathBuf::from("data/dataset.csv"),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// train, val_tune, val_es, test.
    pub fractions: [f64; 4],
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            fractions: [0.70, 0.10, 0.05, 0.15],
        }
    }
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub forest: ForestConfig,
    pub logistic: LogisticConfig,
    pub encoder: EncoderConfig,
    pub distill: DistillConfig,
    pub proxy: ProxyConfig,
    pub cvae: CvaeConfig,
    pub tuning: CvaeSearchConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let body = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str(&body).map_err(|source| ConfigError::Parse {
                    path: p.to_path_buf(),
                    source,
                })?
            }
            None => RunConfig::default(),
        };
        // the tuning search always perturbs the configured CVAE schedule
        cfg.tuning.base = cfg.cvae.clone();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds must be nonempty".into()));
        }
        if self.run.k_grid.is_empty() {
            return Err(ConfigError::Invalid("run.k_grid must be nonempty".into()));
        }
        for w in self.run.k_grid.windows(2) {
            if w[0] >= w[1] {
                return Err(ConfigError::Invalid(
                    "run.k_grid must be strictly ascending".into(),
                ));
            }
        }
        if self.run.k_grid[0] == 0 {
            return Err(ConfigError::Invalid("run.k_grid entries must be positive".into()));
        }
        let sum: f64 = self.split.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "split.fractions must sum to 1, got {sum}"
            )));
        }
        if self.split.fractions.iter().any(|&f| f <= 0.0) {
            return Err(ConfigError::Invalid(
                "split.fractions must all be positive".into(),
            ));
        }
        if self.tuning.trials == 0 {
            return Err(ConfigError::Invalid("tuning.trials must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON for hashing a config slice into a stage's inputs.
    pub fn slice_json<T: serde::Serialize>(value: &T) -> String {
        serde_json::to_string(value).expect("config serializes")
    }
}
