//! Run configuration: one JSON document covering every stage.
//!
//! Without a file every key takes its default. A supplied file must spell out
//! every key; a missing or unknown one is a validation error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use longichange::inference::Connectivity;
use longichange::phantom::PhantomConfig;
use longichange::training::{DetectorTraining, TrainSchedule};
use longichange::vae::VaeConfig;
use longichange::volume::PercentileDomain;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub p_low: f64,
    pub p_high: f64,
    pub domain: PercentileDomain,
    /// Isotropic voxel size in mm; `null` keeps the native grid.
    pub target_mm: Option<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            p_low: 1.0,
            p_high: 99.0,
            domain: PercentileDomain::Foreground,
            target_mm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub kappa: f64,
    pub min_blob: usize,
    pub connectivity: Connectivity,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            min_blob: 20,
            connectivity: Connectivity::TwentySix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub iou_min: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { iou_min: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub vae: VaeConfig,
    pub vae_schedule: TrainSchedule,
    pub detector: DetectorTraining,
    pub detector_schedule: TrainSchedule,
    pub inference: InferenceConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            preprocess: PreprocessConfig::default(),
            vae: VaeConfig::default(),
            vae_schedule: TrainSchedule::vae_default(),
            detector: DetectorTraining::default(),
            detector_schedule: TrainSchedule::detector_default(),
            inference: InferenceConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one seed to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.vae_schedule.seed = seed;
        self.detector_schedule.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: longichange::Result<()>| r.map_err(|e| CliError::Config(e.to_string()));
        check(self.phantom.validate())?;
        check(self.vae.validate())?;
        check(self.vae_schedule.validate())?;
        check(self.detector.detector.validate())?;
        check(self.detector.loss.validate())?;
        check(self.detector.supermix.validate())?;
        check(self.detector_schedule.validate())?;
        let p = &self.preprocess;
        if !(0.0..=100.0).contains(&p.p_low) || !(0.0..=100.0).contains(&p.p_high) || p.p_low >= p.p_high {
            return Err(CliError::Config(
                "invalid `preprocess.p_low`/`p_high`: need 0 <= p_low < p_high <= 100".into(),
            ));
        }
        if p.target_mm.is_some_and(|t| t.is_nan() || t <= 0.0) {
            return Err(CliError::Config("invalid `preprocess.target_mm`: must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.inference.kappa) {
            return Err(CliError::Config("invalid `inference.kappa`: must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.evaluation.iou_min) {
            return Err(CliError::Config(
                "invalid `evaluation.iou_min`: must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}
