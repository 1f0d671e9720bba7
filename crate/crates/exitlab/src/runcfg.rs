//! Run configuration: one TOML file drives every pipeline stage.
//!
//! The file is the single source of truth; command-line flags override
//! individual keys and the effective configuration is echoed into the output
//! directory. Unknown keys are rejected outright.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::rl::RlConfig;
use crate::tasks::TaskFamily;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// 0 uses every available core.
    pub workers: usize,
    pub model: ModelConfig,
    pub task: TaskSettings,
    pub pretrain: PretrainSettings,
    pub calibration: CalibrationSettings,
    pub rl: RlSettings,
    pub decode: DecodeOverrides,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            workers: 0,
            model: ModelConfig::default(),
            task: TaskSettings::default(),
            pretrain: PretrainSettings::default(),
            calibration: CalibrationSettings::default(),
            rl: RlSettings::default(),
            decode: DecodeOverrides::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSettings {
    /// "arithmetic" or "belief-tracking".
    pub family: String,
    pub operand_max: u64,
    pub n_moves: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
}

impl Default for TaskSettings {
    fn default() -> Self {
        TaskSettings {
            family: "arithmetic".into(),
            operand_max: 20,
            n_moves: 2,
            train_examples: 4000,
            eval_examples: 200,
        }
    }
}

impl TaskSettings {
    pub fn family(&self) -> Result<TaskFamily> {
        TaskFamily::parse(&self.family)
            .map_err(|_| Error::Config(format!("unknown task family {:?}", self.family)))
    }

    pub fn generate(&self, seed: u64, n: usize) -> Result<Vec<crate::tasks::TaskInstance>> {
        Ok(match self.family()? {
            TaskFamily::Arithmetic => crate::tasks::gen_arithmetic(seed, n, self.operand_max),
            TaskFamily::BeliefTracking => {
                crate::tasks::gen_belief_tracking(seed, n, self.n_moves)
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub target_accuracy: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let d = PretrainConfig::default();
        PretrainSettings {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            target_accuracy: d.target_accuracy,
        }
    }
}

impl PretrainSettings {
    pub fn to_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            target_accuracy: self.target_accuracy,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub kl_factor: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Number of corpus sequences generated from the task family when no
    /// corpus file is supplied.
    pub sequences: usize,
    /// Optional newline-delimited plain-text corpus file.
    pub corpus: Option<PathBuf>,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let d = CalibrationConfig::default();
        CalibrationSettings {
            kl_factor: d.kl_factor,
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            sequences: 2000,
            corpus: None,
        }
    }
}

impl CalibrationSettings {
    pub fn to_config(&self, seed: u64) -> CalibrationConfig {
        CalibrationConfig {
            kl_factor: self.kl_factor,
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlSettings {
    pub lambda: f64,
    pub beta: f64,
    pub k: usize,
    pub steps: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub depth_normalized: bool,
    pub lr: f64,
    pub prompts_per_step: usize,
    pub eval_every: usize,
    pub eval_prompts: usize,
    /// Save a checkpoint every N steps (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for RlSettings {
    fn default() -> Self {
        let d = RlConfig::default();
        RlSettings {
            lambda: d.lambda,
            beta: d.beta,
            k: d.k,
            steps: d.steps,
            temperature: d.temperature,
            max_new_tokens: d.max_new_tokens,
            depth_normalized: d.depth_normalized,
            lr: d.lr,
            prompts_per_step: d.prompts_per_step,
            eval_every: d.eval_every,
            eval_prompts: d.eval_prompts,
            checkpoint_every: 100,
        }
    }
}

impl RlSettings {
    pub fn to_config(&self, seed: u64, exit_offset: f64) -> RlConfig {
        RlConfig {
            lambda: self.lambda,
            beta: self.beta,
            k: self.k,
            steps: self.steps,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            depth_normalized: self.depth_normalized,
            lr: self.lr,
            prompts_per_step: self.prompts_per_step,
            eval_every: self.eval_every,
            eval_prompts: self.eval_prompts,
            exit_offset,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeOverrides {
    /// Exit-logit offset applied at inference; 0 leaves the policy untouched.
    pub offset: f64,
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub kl_factor: Option<f64>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub k: Option<usize>,
    pub steps: Option<usize>,
    pub offset: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = o.kl_factor {
            self.calibration.kl_factor = v;
        }
        if let Some(v) = o.lambda {
            self.rl.lambda = v;
        }
        if let Some(v) = o.beta {
            self.rl.beta = v;
        }
        if let Some(v) = o.k {
            self.rl.k = v;
        }
        if let Some(v) = o.steps {
            self.rl.steps = v;
        }
        if let Some(v) = o.offset {
            self.decode.offset = v;
        }
    }

    /// Write the effective configuration into the output directory.
    pub fn echo(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        std::fs::write(self.out_dir.join("effective-config.toml"), text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.vocab_size < crate::tasks::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} is below the tokenizer alphabet size {}",
                self.model.vocab_size,
                crate::tasks::VOCAB_SIZE
            )));
        }
        self.task.family()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.rl.lambda, cfg.rl.lambda);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("sede = 3\n");
        assert!(err.is_err());
        let err = toml::from_str::<RunConfig>("[rl]\nlambada = 1.0\n");
        assert!(err.is_err());
        // nested typo in model section
        let err = toml::from_str::<RunConfig>("[model]\nn_layer = 8\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg: RunConfig = toml::from_str("seed = 9\n[rl]\nlambda = 2.5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.rl.lambda, 2.5);
        assert_eq!(cfg.rl.beta, RlSettings::default().beta);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(7),
            lambda: Some(0.5),
            kl_factor: Some(4.0),
            ..Default::default()
        });
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.rl.lambda, 0.5);
        assert_eq!(cfg.calibration.kl_factor, 4.0);
    }
}
