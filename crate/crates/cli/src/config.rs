//! The run configuration file.

use serde::{Deserialize, Serialize};

use rlhf_core::data::{CorpusPlan, TaskSpec, VarianceFilterConfig};
use rlhf_core::offline::DpoConfig;
use rlhf_core::planner::{CostModelParams, WorkloadKind};
use rlhf_core::ppo::PpoConfig;
use rlhf_core::reward::RewardTrainConfig;
use rlhf_core::ModelConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: TaskSpec,
    pub corpus: CorpusPlan,
    pub bucket_width: usize,
    pub balance: bool,
    /// Fraction of preference pairs held out for reward evaluation.
    pub heldout_frac: f64,
    /// Minimum prompt length in tokens for the quality filter.
    pub min_len: usize,
    pub variance: VarianceFilterConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            task: TaskSpec::default(),
            corpus: CorpusPlan::default(),
            bucket_width: 8,
            balance: true,
            heldout_frac: 0.1,
            min_len: 2,
            variance: VarianceFilterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { lr: 1e-2, epochs: 10, batch_size: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RftConfig {
    pub k: usize,
    pub top_p: f64,
    pub max_new: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for RftConfig {
    fn default() -> Self {
        RftConfig { k: 4, top_p: 0.9, max_new: 8, lr: 1e-3, epochs: 5, batch_size: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tie_band: f64,
    pub bins: usize,
    pub max_new: usize,
    /// Responses sampled per eval prompt for the reward histogram.
    pub hist_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { tie_band: 0.05, bins: 20, max_new: 8, hist_samples: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub devices: usize,
    pub workload: WorkloadKind,
    pub cost: CostModelParams,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig { devices: 8, workload: WorkloadKind::Ppo, cost: CostModelParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub work_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { work_dir: "work".into() }
    }
}

/// Whole-pipeline configuration. Stage seeds inside sections are ignored;
/// every stage derives its seed from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub sft: SftConfig,
    pub reward: RewardTrainConfig,
    pub ppo: PpoConfig,
    pub dpo: DpoConfig,
    pub rft: RftConfig,
    pub eval: EvalConfig,
    pub planner: PlannerConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.data.task.validate()?;
        if !(0.0..1.0).contains(&self.data.heldout_frac) {
            return Err(CliError::Config("data.heldout_frac must be in [0, 1)".into()));
        }
        if self.data.bucket_width == 0 {
            return Err(CliError::Config("data.bucket_width must be positive".into()));
        }
        if self.sft.batch_size == 0 || !(self.sft.lr > 0.0) {
            return Err(CliError::Config("sft.lr and sft.batch_size must be positive".into()));
        }
        if self.rft.k == 0 || self.rft.batch_size == 0 {
            return Err(CliError::Config("rft.k and rft.batch_size must be positive".into()));
        }
        if !(self.eval.tie_band >= 0.0) || self.eval.bins == 0 || self.eval.hist_samples == 0 {
            return Err(CliError::Config("eval.tie_band must be >= 0; bins and hist_samples positive".into()));
        }
        self.reward.validate()?;
        self.ppo.validate()?;
        self.dpo.validate()?;
        self.planner.cost.validate()?;
        Ok(())
    }

    /// Canonical text used for the manifest hash.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.canonical()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[ppo]\nbeta = 0.1").is_err());
        assert!(RunConfig::parse("[data.task]\nannotation_noise = 0.7").is_err());
        let c = RunConfig::parse("seed = 9\n[ppo]\nbeta_kl = 0.2\n[data.corpus]\npairs = 10").unwrap();
        assert_eq!((c.seed, c.ppo.beta_kl, c.data.corpus.pairs), (9, 0.2, 10));
    }
}
