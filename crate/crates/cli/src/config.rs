//! TOML run configuration. Every section is optional; missing keys take the
//! library defaults.

use std::path::{Path, PathBuf};

use motionloop_core::annotate::{AnnotationConfig, VocabMode};
use motionloop_core::control::EpisodeConfig;
use motionloop_core::lifecycle::{LifelongConfig, PredictorConfig};
use motionloop_core::policy::{PolicyDims, TrainConfig};
use motionloop_core::sim::{DemoConfig, FaultConfig, SimConfig, TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Base seed for rollouts and evaluation.
    pub seed: u64,
    pub task: String,
    pub vocab_mode: VocabMode,
    pub annotation: AnnotationConfig,
    pub sim: SimConfig,
    pub faults: FaultConfig,
    pub episode: EpisodeConfig,
    pub demos: DemoConfig,
    pub policy: PolicySection,
    pub train: TrainConfig,
    pub predictor: PredictorConfig,
    pub arm: ArmSection,
    pub lifelong: LifelongConfig,
    pub curve: CurveSection,
    pub serve: ServeSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            task: "pick_place".into(),
            vocab_mode: VocabMode::Combined,
            annotation: AnnotationConfig::default(),
            sim: SimConfig::default(),
            faults: FaultConfig::default(),
            episode: EpisodeConfig::default(),
            demos: DemoConfig::default(),
            policy: PolicySection::default(),
            train: TrainConfig::default(),
            predictor: PredictorConfig::default(),
            arm: ArmSection::default(),
            lifelong: LifelongConfig::default(),
            curve: CurveSection::default(),
            serve: ServeSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Learned,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub dims: PolicyDims,
    pub diffusion_steps: usize,
    pub conditioning: Conditioning,
    pub codebook_dim: usize,
    /// Sampler noise multiplier at inference; 0 follows the posterior mean.
    pub noise_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            dims: PolicyDims::default(),
            diffusion_steps: 50,
            conditioning: Conditioning::Learned,
            codebook_dim: 32,
            noise_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Oracle,
    Learned,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectorKind {
    None,
    Oracle,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Follower,
    Diffusion,
}

/// Which components drive an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmSection {
    pub predictor: PredictorKind,
    /// JSON file written by `train-predictor`.
    pub predictor_path: Option<PathBuf>,
    /// Probability of replacing the predictor output at random.
    pub corruption: f64,
    pub corrector: CorrectorKind,
    /// Distance from the oracle waypoint counted as a failure, meters.
    pub fail_dist: f64,
    pub policy: PolicyKind,
    pub checkpoint: Option<PathBuf>,
    pub remote: RemoteSection,
}

impl Default for ArmSection {
    fn default() -> Self {
        ArmSection {
            predictor: PredictorKind::Oracle,
            predictor_path: None,
            corruption: 0.0,
            corrector: CorrectorKind::Oracle,
            fail_dist: 0.05,
            policy: PolicyKind::Follower,
            checkpoint: None,
            remote: RemoteSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSection {
    pub endpoint: String,
    pub prompt: String,
    pub timeout_ms: u64,
}

impl Default for RemoteSection {
    fn default() -> Self {
        RemoteSection {
            endpoint: "http://127.0.0.1:9000/v1/motion".into(),
            prompt: "task: {task}\nmode: {mode}\nobservation: {obs}\ninstruction: {m_i}\nreflection: {semantic}".into(),
            timeout_ms: 5000,
        }
    }
}

/// Lifelong curve protocol around the per-iteration settings in `[lifelong]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    /// Expert demonstrations available for mixing.
    pub expert_pool: usize,
    /// Demonstrations used to fit the initial predictor.
    pub initial_demos: usize,
    /// Held-out demonstrations for the forgetting check.
    pub held_out_demos: usize,
    /// Cumulative rollout counts at which the predictor is retrained.
    pub checkpoints: Vec<usize>,
    /// Episodes used to build the fixed deployment evaluation set.
    pub deployment_episodes: usize,
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection {
            expert_pool: 60,
            initial_demos: 5,
            held_out_demos: 20,
            checkpoints: vec![10, 30],
            deployment_episodes: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub step_gate: bool,
    pub period_ms: u64,
    pub export: Option<PathBuf>,
    /// Directory with a built UI bundle, served at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { addr: "127.0.0.1:8080".into(), step_gate: false, period_ms: 500, export: None, ui_dir: None }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config, CliError> {
        let cfg = match path {
            None => Config::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        Ok(cfg)
    }

    /// Applies `--seed` to every seeded stage.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.demos.seed = seed;
        self.train.seed = seed;
        self.predictor.seed = seed;
        self.lifelong.predictor.seed = seed;
        self.lifelong.mix_seed = seed;
        self.lifelong.rollout_seed = seed.wrapping_add(10_000);
        self.lifelong.eval_seed = seed.wrapping_add(50_000);
    }

    pub fn task_spec(&self) -> Result<TaskSpec, CliError> {
        let kind = TaskKind::parse(&self.task)
            .ok_or_else(|| CliError::Config(format!("unknown task `{}` (reach, pick_place, stack_two)", self.task)))?;
        Ok(TaskSpec::by_kind(kind))
    }

    /// Episode settings with the configured faults and the task's budget.
    pub fn episode_for(&self, spec: &TaskSpec) -> EpisodeConfig {
        EpisodeConfig { budget: spec.max_periods, faults: self.faults, ..self.episode.clone() }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.annotation.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.faults.validate().map_err(CliError::Config)?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.task_spec()?;
        if !(0.0..=1.0).contains(&self.arm.corruption) {
            return Err(CliError::Config(format!("arm.corruption {} not in [0, 1]", self.arm.corruption)));
        }
        if self.episode.history == 0 || self.episode.assess_every == 0 {
            return Err(CliError::Config("episode.history and episode.assess_every must be at least 1".into()));
        }
        if self.policy.noise_scale < 0.0 {
            return Err(CliError::Config("policy.noise_scale must be non-negative".into()));
        }
        Ok(())
    }
}
