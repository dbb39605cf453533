//! The JSON experiment configuration and its validation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use dfkc::denoiser::DataSpec;
use dfkc::oracle::FkeOptions;
use dfkc::smc::StepModeConfig;
use dfkc::{
    BetaSchedule, MaskingSchedule, ResamplingPolicy, ScheduleKind, SeparableReward, SmcConfig, TabularDataDistribution,
    TargetSpec,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Sample,
    Oracle,
    Ising,
    Selfcheck,
}

/// Where one data distribution comes from: inline table or Ising spec, or a
/// JSON file holding either.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    File { file: PathBuf },
    Inline(DataSpec),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum RewardValues {
    /// One row of token values per position.
    PerPosition(Vec<Vec<f64>>),
    /// The same token values at every position.
    Shared(Vec<f64>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetConfig {
    #[default]
    Base,
    Anneal {
        beta: f64,
    },
    Product,
    GeoAvg {
        betas: Vec<f64>,
    },
    /// Separable reward R(x) = Σ_k φ_k(x_k), with masked tokens scoring 0.
    Reward {
        phi: RewardValues,
        #[serde(default)]
        beta: BetaSchedule,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsingConfig {
    #[serde(rename = "L")]
    pub l: usize,
    pub beta_data: f64,
    pub beta_mult: f64,
    #[serde(rename = "J", default = "one")]
    pub j: f64,
    #[serde(default)]
    pub h: f64,
    #[serde(default = "default_reference_samples")]
    pub reference_samples: usize,
    #[serde(default = "default_reference_burn_in")]
    pub reference_burn_in: usize,
}

fn one() -> f64 {
    1.0
}

fn default_reference_samples() -> usize {
    20_000
}

fn default_reference_burn_in() -> usize {
    1_000
}

fn default_k() -> usize {
    1024
}

fn default_n_steps() -> usize {
    200
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When present, must agree with the subcommand.
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub data: Vec<DataSource>,
    #[serde(default)]
    pub target: TargetConfig,
    #[serde(default)]
    pub schedule: Option<ScheduleKind>,
    #[serde(default)]
    pub t_min: Option<f64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub resampling: ResamplingPolicy,
    #[serde(default)]
    pub step_mode: StepModeConfig,
    #[serde(default)]
    pub oracle: FkeOptions,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub ising: Option<IsingConfig>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config parses")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn check_task(&self, task: Task) -> Result<(), CliError> {
        match self.task {
            Some(t) if t != task => Err(CliError::Config(format!(
                "config is for task {t:?} but the {task:?} command was run"
            ))),
            _ => Ok(()),
        }
    }

    pub fn masking_schedule(&self) -> Result<MaskingSchedule, CliError> {
        let base = match self.schedule.unwrap_or(ScheduleKind::Linear) {
            ScheduleKind::Linear => MaskingSchedule::linear(),
            ScheduleKind::Cosine => MaskingSchedule::cosine(),
        };
        match self.t_min {
            Some(t_min) => Ok(base.with_t_min(t_min)?),
            None => Ok(base),
        }
    }

    pub fn smc_config(&self) -> Result<SmcConfig, CliError> {
        if self.k == 0 {
            return Err(CliError::Config("k must be at least 1".into()));
        }
        if self.n_steps == 0 {
            return Err(CliError::Config("n_steps must be at least 1".into()));
        }
        self.resampling.validate()?;
        let mut config = SmcConfig::new(self.k, self.n_steps, self.seed).with_policy(self.resampling);
        config.step_mode = self.step_mode;
        Ok(config)
    }

    /// Load every data source, resolving relative file paths against `base_dir`.
    pub fn load_data(&self, base_dir: &Path) -> Result<Vec<TabularDataDistribution>, CliError> {
        if self.data.is_empty() {
            return Err(CliError::Config("config has no data distributions".into()));
        }
        let loaded = self
            .data
            .iter()
            .map(|source| match source {
                DataSource::Inline(spec) => Ok(TabularDataDistribution::from_spec(spec)?),
                DataSource::File { file } => Ok(TabularDataDistribution::load(&base_dir.join(file))?),
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let (vocab, d) = (loaded[0].vocab(), loaded[0].seq_len());
        if loaded.iter().any(|p| p.vocab() != vocab || p.seq_len() != d) {
            return Err(CliError::Config("all data distributions must share V and d".into()));
        }
        Ok(loaded)
    }

    pub fn target_spec(&self, data: &[TabularDataDistribution]) -> Result<TargetSpec, CliError> {
        let spec = match &self.target {
            TargetConfig::Base => TargetSpec::Base,
            TargetConfig::Anneal { beta } => TargetSpec::Anneal { beta: *beta },
            TargetConfig::Product => TargetSpec::Product,
            TargetConfig::GeoAvg { betas } => TargetSpec::GeoAvg { betas: betas.clone() },
            TargetConfig::Reward { phi, beta } => {
                let vocab = data[0].vocab();
                let reward = match phi {
                    RewardValues::PerPosition(rows) => {
                        if rows.len() != 1 && rows.len() != data[0].seq_len() {
                            return Err(CliError::Config(format!(
                                "reward phi has {} rows but d = {}",
                                rows.len(),
                                data[0].seq_len()
                            )));
                        }
                        SeparableReward::new(vocab, rows.clone())?
                    }
                    RewardValues::Shared(row) => SeparableReward::shared(vocab, row.clone())?,
                };
                TargetSpec::Reward {
                    reward: Arc::new(reward),
                    beta: *beta,
                }
            }
        };
        spec.validate(data.len())?;
        Ok(spec)
    }
}
