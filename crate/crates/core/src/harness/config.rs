//! Experiment configuration, read from TOML. Every section has defaults and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::envs::EnvConfig;
use crate::error::{Error, Result};
use crate::policy::{ChunkSpec, PretrainConfig};
use crate::remac::TrainConfig;
use crate::runtime::{Corruption, StrategyKind, StrategyParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { episodes: 1000 }
    }
}

/// Delay/horizon grid evaluated by `eval` and `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub delays: Vec<usize>,
    pub strategies: Vec<StrategyKind>,
    pub episodes: usize,
    /// Controller period in simulated ms.
    pub dt_ms: f64,
    /// Estimator window over measured delays.
    pub window: usize,
    /// Write one CSV row per episode next to the summary.
    pub episode_records: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            delays: vec![0, 1, 2, 3, 4],
            strategies: vec![
                StrategyKind::Sync,
                StrategyKind::NaiveAsync,
                StrategyKind::TemporalEnsemble,
                StrategyKind::RtcLite,
                StrategyKind::Remac,
            ],
            episodes: 300,
            dt_ms: 20.0,
            window: 3,
            episode_records: true,
        }
    }
}

/// REMAC under a corrupted delay estimate, next to accurate estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessConfig {
    pub enabled: bool,
    pub corruption: Corruption,
    /// Largest delay a corrupted estimate may report.
    pub max_delay: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            corruption: Corruption::NoisySpiky,
            max_delay: 4,
        }
    }
}

/// Synchronous vs. REMAC action streams under an injected latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KinematicsConfig {
    pub enabled: bool,
    pub injection_ms: f64,
    pub dt_ms: f64,
    pub exec_horizon: usize,
    pub episodes: usize,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            injection_ms: 150.0,
            dt_ms: 50.0,
            exec_horizon: 4,
            episodes: 60,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    ComponentStack,
    SigmaSchedule,
    QInterval,
    MaskEmbedding,
    FreezeLength,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::ComponentStack => "component-stack",
            Self::SigmaSchedule => "sigma-schedule",
            Self::QInterval => "q-interval",
            Self::MaskEmbedding => "mask-embedding",
            Self::FreezeLength => "freeze-length",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub axes: Vec<AblationAxis>,
    pub delays: Vec<usize>,
    pub episodes: usize,
    /// `(q_max, q_min)` pairs for the q-interval axis.
    pub q_intervals: Vec<(usize, usize)>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            axes: vec![AblationAxis::ComponentStack],
            delays: vec![0, 1, 2, 3, 4],
            episodes: 300,
            q_intervals: vec![(4, 0), (4, 2), (2, 0), (6, 0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    pub width: u32,
    pub height: u32,
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 420,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub data: DataConfig,
    pub chunk: ChunkSpec,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub strategy: StrategyParams,
    pub sweep: SweepConfig,
    pub robustness: RobustnessConfig,
    pub kinematics: KinematicsConfig,
    pub ablation: AblationConfig,
    pub plot: PlotConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.chunk.validate()?;
        self.train.mask_interval.validate(self.chunk.horizon)?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.data.episodes == 0 {
            return bad("data.episodes must be >= 1");
        }
        if self.sweep.episodes == 0 || self.ablation.episodes == 0 {
            return bad("episode counts must be >= 1");
        }
        if self.sweep.strategies.is_empty() {
            return bad("sweep.strategies must not be empty");
        }
        let p = self.chunk.horizon;
        if let Some(d) = self.sweep.delays.iter().chain(&self.ablation.delays).find(|&&d| d >= p) {
            return bad(&format!("delay {d} leaves no valid execution horizon at P={p}"));
        }
        if let Some((qmax, qmin)) = self.ablation.q_intervals.iter().find(|(a, b)| b > a || *a >= p) {
            return bad(&format!("q interval ({qmax}, {qmin}) needs q_min <= q_max <= P-1"));
        }
        if !(self.sweep.dt_ms > 0.0 && self.kinematics.dt_ms > 0.0) {
            return bad("controller periods must be > 0");
        }
        if self.kinematics.exec_horizon == 0 || self.kinematics.exec_horizon > p {
            return bad("kinematics.exec_horizon must be in 1..=P");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("[sweep]\nepisodes = 7\ndelays = [0, 2]\n").unwrap();
        assert_eq!(cfg.sweep.episodes, 7);
        assert_eq!(cfg.sweep.delays, vec![0, 2]);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml("[sweep]\nepisodez = 7\n").is_err());
        assert!(ExperimentConfig::from_toml("[swept]\n").is_err());
        assert!(ExperimentConfig::from_toml("[train.mask_interval]\nq_maxx = 3\n").is_err());
    }

    #[test]
    fn invalid_values_are_errors() {
        assert!(ExperimentConfig::from_toml("[sweep]\ndelays = [8]\n").is_err());
        assert!(ExperimentConfig::from_toml("[ablation]\nq_intervals = [[1, 3]]\n").is_err());
        assert!(ExperimentConfig::from_toml("[data]\nepisodes = 0\n").is_err());
        assert!(ExperimentConfig::from_toml("[ablation]\naxes = [\"colour\"]\n").is_err());
    }
}
