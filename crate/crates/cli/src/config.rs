//! Experiment configuration. Every field has a default, and the copy written
//! next to a run has all of them filled in so the run can be replayed.

use std::fs;
use std::path::Path;

use icrm::eval::DEFAULT_MIX_RATIOS;
use icrm::model::{Objective, TaskMode, TrainConfig};
use icrm::synth::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub objective: Objective,
    pub task: TaskMode,
    pub context_free: bool,
    pub n_values: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(Objective::icrm(0.1), 0);
        Self {
            objective: t.objective,
            task: t.task,
            context_free: t.context_free,
            n_values: t.n_values,
            steps: t.steps,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            clip_norm: t.clip_norm,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            objective: self.objective,
            task: self.task,
            context_free: self.context_free,
            n_values: self.n_values.clone(),
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditSection {
    pub context_n: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for BanditSection {
    fn default() -> Self {
        let b = icrm::eval::BanditConfig::new(0);
        Self {
            context_n: 32,
            steps: b.steps,
            batch_size: b.batch_size,
            learning_rate: b.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Number of evaluation seeds derived from the command's seed.
    pub seeds: usize,
    pub episodes: usize,
    pub queries: usize,
    pub n_values: Vec<usize>,
    pub pareto_n_values: Vec<usize>,
    pub mix_ratios: Vec<f64>,
    pub bandit: BanditSection,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: 4,
            episodes: 200,
            queries: 20,
            n_values: vec![1, 2, 4, 8, 16, 32],
            pareto_n_values: vec![1, 2, 4, 8, 16],
            mix_ratios: DEFAULT_MIX_RATIOS.to_vec(),
            bandit: BanditSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Filled in from `--seed` in persisted copies; must agree with it when
    /// present in an input file.
    pub seed: Option<u64>,
    pub world: WorldConfig,
    pub train: TrainSection,
    /// When nonempty, one run per value with an ICRM objective at that λ.
    pub lambda_sweep: Vec<f64>,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            world: WorldConfig::default(),
            train: TrainSection::default(),
            lambda_sweep: Vec::new(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{origin}: field `{path}`: {}", e.into_inner()))
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{origin}: field `schema_version`: unsupported version {}, expected {SCHEMA_VERSION}",
                cfg.schema_version
            )));
        }
        cfg.world
            .validate()
            .map_err(|e| CliError::Config(format!("{origin}: field `world`: {e}")))?;
        Ok(cfg)
    }

    /// Loads `path`, or the defaults when no path is given, and reconciles
    /// the file's seed with the command-line seed.
    pub fn load(path: Option<&Path>, seed: u64) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text, &p.display().to_string())?
            }
            None => Self::default(),
        };
        if let Some(s) = cfg.seed {
            if s != seed {
                return Err(CliError::Config(format!(
                    "field `seed`: config has {s} but --seed is {seed}"
                )));
            }
        }
        cfg.seed = Some(seed);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
