//! Run configuration: one JSON document covering every configurable value.
//! Every field has a default, so `{}` is a complete configuration.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adam::AdamConfig;
use crate::baselines::VarproConfig;
use crate::error::{QfitError, Result};
use crate::experiment::{config_hash, MrfExperimentConfig, NoiseExperimentConfig};
use crate::signal::{default_schedule, DictionaryGrid, EchoProtocol, FispSchedule};
use crate::train::{RelaxometryOptions, TrainingConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { size: 64, seed: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub variance: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            variance: 0.001,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UndersamplingConfig {
    pub acceleration: usize,
    pub seed: u64,
}

impl Default for UndersamplingConfig {
    fn default() -> Self {
        Self {
            acceleration: 6,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrfNetworkOptions {
    pub base_width: usize,
    pub n_residual_blocks: usize,
    /// Feed all `2T` frames instead of the projected `2K` coefficient planes.
    pub raw_input: bool,
}

impl Default for MrfNetworkOptions {
    fn default() -> Self {
        Self {
            base_width: 64,
            n_residual_blocks: 9,
            raw_input: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSeeds {
    pub noise: Vec<u64>,
    pub mrf: Vec<u64>,
}

impl Default for ExperimentSeeds {
    fn default() -> Self {
        Self {
            noise: vec![1, 2, 3],
            mrf: vec![1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub protocol: EchoProtocol,
    pub schedule: FispSchedule,
    pub grid: DictionaryGrid,
    pub energy_target: f64,
    pub noise: NoiseConfig,
    pub undersampling: UndersamplingConfig,
    pub varpro: VarproConfig,
    pub relaxometry: RelaxometryOptions,
    pub relaxometry_training: TrainingConfig,
    pub mrf_network: MrfNetworkOptions,
    pub mrf_training: TrainingConfig,
    pub mrf_variance: f64,
    pub seeds: ExperimentSeeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            protocol: EchoProtocol::gre_10_echo(),
            schedule: default_schedule(),
            grid: DictionaryGrid::default(),
            energy_target: 0.999999,
            noise: NoiseConfig::default(),
            undersampling: UndersamplingConfig::default(),
            varpro: VarproConfig::default(),
            relaxometry: RelaxometryOptions {
                base_width: 6,
                ..RelaxometryOptions::default()
            },
            relaxometry_training: TrainingConfig {
                adam: AdamConfig {
                    lr: 2e-3,
                    ..AdamConfig::default()
                },
                ..TrainingConfig::default()
            },
            mrf_network: MrfNetworkOptions {
                base_width: 8,
                ..MrfNetworkOptions::default()
            },
            mrf_training: TrainingConfig {
                adam: AdamConfig {
                    lr: 2e-3,
                    ..AdamConfig::default()
                },
                iterations: 1000,
                ..TrainingConfig::default()
            },
            mrf_variance: 0.001,
            seeds: ExperimentSeeds::default(),
        }
    }
}

/// Applies a `dotted.key=value` override to a JSON document. The key must
/// already exist; the value is parsed as JSON, falling back to a string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| QfitError::Config(format!("override {assignment:?} is not key=value")))?;
    let mut node = doc;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| QfitError::Config(format!("unknown configuration key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

impl RunConfig {
    /// Parses a JSON document (missing fields take defaults, unknown ones are
    /// rejected), then applies overrides in order.
    pub fn resolve(json: Option<&str>, overrides: &[String]) -> Result<Self> {
        let base: RunConfig = match json {
            Some(text) => serde_json::from_str(text).map_err(|e| QfitError::Config(e.to_string()))?,
            None => RunConfig::default(),
        };
        let mut doc = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| QfitError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.schedule.validate()?;
        self.varpro.validate()?;
        self.relaxometry_training.validate()?;
        self.mrf_training.validate()?;
        if self.phantom.size < 8 {
            return Err(QfitError::Config("phantom size must be at least 8".into()));
        }
        if !(self.energy_target > 0.0 && self.energy_target <= 1.0) {
            return Err(QfitError::Config("energy_target must lie in (0, 1]".into()));
        }
        if !(self.noise.variance >= 0.0 && self.mrf_variance >= 0.0) {
            return Err(QfitError::Config("noise variances must be non-negative".into()));
        }
        if self.undersampling.acceleration == 0 || self.undersampling.acceleration > self.phantom.size {
            return Err(QfitError::Config(format!(
                "acceleration must lie in 1..={}",
                self.phantom.size
            )));
        }
        if self.relaxometry.t2_min_ms >= self.relaxometry.t2_max_ms {
            return Err(QfitError::Config("relaxometry T2 bounds are inverted".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn noise_experiment(&self) -> NoiseExperimentConfig {
        NoiseExperimentConfig {
            size: self.phantom.size,
            phantom_seed: self.phantom.seed,
            protocol: self.protocol.clone(),
            variance: self.noise.variance,
            seeds: self.seeds.noise.clone(),
            varpro: self.varpro.clone(),
            network: self.relaxometry.clone(),
            training: self.relaxometry_training.clone(),
            baselines_only: false,
        }
    }

    pub fn mrf_experiment(&self) -> MrfExperimentConfig {
        MrfExperimentConfig {
            size: self.phantom.size,
            phantom_seed: self.phantom.seed,
            schedule: self.schedule.clone(),
            grid: self.grid.clone(),
            energy_target: self.energy_target,
            acceleration: self.undersampling.acceleration,
            variance: self.mrf_variance,
            seeds: self.seeds.mrf.clone(),
            base_width: self.mrf_network.base_width,
            n_residual_blocks: self.mrf_network.n_residual_blocks,
            raw_input: self.mrf_network.raw_input,
            training: self.mrf_training.clone(),
            baselines_only: false,
        }
    }
}
