//! Experiment configuration: flat TOML files, one per experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::FairnessMetric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Central mini-batch SGD baseline.
    SgdCentral,
    /// Federated SGD baseline (optionally clipped / privatized).
    #[serde(rename = "fedsgd")]
    FedSgd,
    /// Multiplier method without damping (c = 0). Central unless
    /// `federated = true`.
    Bmdm,
    /// Damped multiplier method, central setting.
    Mmdm,
    /// Damped multiplier method in the federated protocol.
    Fpfl,
    /// Sign-free multiplier variant with clamped lambda. Central unless
    /// `federated = true`.
    Tran,
}

impl Algorithm {
    pub fn label(&self) -> &'static str {
        match self {
            Algorithm::SgdCentral => "sgd_central",
            Algorithm::FedSgd => "fedsgd",
            Algorithm::Bmdm => "bmdm",
            Algorithm::Mmdm => "mmdm",
            Algorithm::Fpfl => "fpfl",
            Algorithm::Tran => "tran",
        }
    }

    /// Does this algorithm enforce fairness constraints?
    pub fn enforces_fairness(&self) -> bool {
        !matches!(self, Algorithm::SgdCentral | Algorithm::FedSgd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    Shallow,
    Deep,
    Cnn,
}

/// What divides the loss-gradient block before the parameter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossNormalizer {
    /// True cohort (or batch) sample count when noise is off; with noise,
    /// the noisy subset-count sum for fairness algorithms and the expected
    /// cohort sample count for plain ones.
    #[default]
    Auto,
    /// Always the true sample count (oracle quantity in private runs).
    TrueCount,
    /// Always the noisy per-group count sum (fairness algorithms only).
    NoisyCount,
    /// Cohort size times the population's mean shard size.
    ExpectedCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySection {
    /// Gaussian noise on aggregates (clipping may be on without noise).
    pub enabled: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Per-contribution l2 clipping bound; absent means no clipping.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Hypothetical-population factor for calibration (1, 100, or 1000).
    #[serde(default = "default_factor")]
    pub population_factor: u32,
}

fn default_epsilon() -> f64 {
    2.0
}
fn default_delta() -> f64 {
    1e-5
}
fn default_factor() -> u32 {
    1
}

impl Default for PrivacySection {
    fn default() -> Self {
        PrivacySection {
            enabled: false,
            epsilon: default_epsilon(),
            delta: default_delta(),
            clip: None,
            population_factor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSection {
    /// Rounds (federated) or mini-batch steps (central).
    pub iterations: usize,
    #[serde(default = "default_cohort")]
    pub cohort_size: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_cohort() -> usize {
    200
}
fn default_batch() -> usize {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Label of the reference results row this configuration reproduces,
    /// matched against the expected-bands table.
    #[serde(default)]
    pub reference_row: Option<String>,
    pub dataset: String,
    pub arch: ArchName,
    pub algorithm: Algorithm,
    /// Run bmdm/tran in the federated protocol instead of centrally.
    #[serde(default)]
    pub federated: bool,
    pub eta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub lambda_max: Option<f64>,
    pub metric: FairnessMetric,
    pub seed: u64,
    #[serde(default)]
    pub loss_normalizer: LossNormalizer,
    #[serde(default)]
    pub privacy: PrivacySection,
    pub schedule: ScheduleSection,
}

impl ExperimentConfig {
    pub fn is_federated(&self) -> bool {
        match self.algorithm {
            Algorithm::SgdCentral | Algorithm::Mmdm => false,
            Algorithm::FedSgd | Algorithm::Fpfl => true,
            Algorithm::Bmdm | Algorithm::Tran => self.federated,
        }
    }

    /// Damping actually applied: bmdm and the sign-free variant drop it.
    pub fn effective_c(&self) -> f64 {
        match self.algorithm {
            Algorithm::Bmdm | Algorithm::Tran => 0.0,
            _ => self.c,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| -> Result<()> {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
            Ok(())
        };
        positive(self.eta, "eta")?;
        if self.algorithm.enforces_fairness() {
            positive(self.gamma, "gamma")?;
            if !(self.alpha.is_finite() && self.alpha >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "alpha must be nonnegative, got {}",
                    self.alpha
                )));
            }
        }
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(Error::InvalidConfig(format!("c must be nonnegative, got {}", self.c)));
        }
        if self.algorithm == Algorithm::Tran {
            match self.lambda_max {
                Some(l) if l.is_finite() && l > 0.0 => {}
                _ => {
                    return Err(Error::InvalidConfig(
                        "the sign-free variant requires a positive lambda_max".into(),
                    ))
                }
            }
        }
        if self.privacy.enabled {
            match self.privacy.clip {
                Some(c) if c.is_finite() && c > 0.0 => {}
                _ => {
                    return Err(Error::InvalidConfig(
                        "privacy.enabled requires a finite positive clip bound".into(),
                    ))
                }
            }
            positive(self.privacy.epsilon, "privacy.epsilon")?;
            if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "privacy.delta must lie in (0,1), got {}",
                    self.privacy.delta
                )));
            }
        }
        if let Some(c) = self.privacy.clip {
            positive(c, "privacy.clip")?;
        }
        if !matches!(self.privacy.population_factor, 1 | 100 | 1000) {
            return Err(Error::InvalidConfig(format!(
                "privacy.population_factor must be 1, 100, or 1000, got {}",
                self.privacy.population_factor
            )));
        }
        if self.is_federated() && self.schedule.cohort_size == 0 {
            return Err(Error::InvalidConfig("cohort_size must be positive".into()));
        }
        if !self.is_federated() && self.schedule.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.loss_normalizer == LossNormalizer::NoisyCount
            && !self.algorithm.enforces_fairness()
        {
            return Err(Error::InvalidConfig(
                "noisy_count normalizer needs the fairness statistics vector".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
