//! Builds episode components from the `[arm]` config section.

use std::sync::Arc;
use std::time::Duration;

use motionloop_core::codebook::NgramEmbedder;
use motionloop_core::control::{remote_model_client, ControlError, MotionCorrector, MotionPredictor};
use motionloop_core::lifecycle::{Arm, LearnedPredictor};
use motionloop_core::policy::{load_checkpoint, DiffusionPolicy};
use motionloop_core::sim::{faulty_predictor, instruction_follower, oracle_corrector, oracle_predictor, OracleContext};

use crate::config::{ArmSection, CorrectorKind, PolicyKind, PredictorKind};
use crate::error::CliError;

/// Loaded artifacts shared by every episode.
#[derive(Clone)]
pub struct ArmKit {
    ctx: Arc<OracleContext>,
    arm: ArmSection,
    learned: Option<LearnedPredictor>,
    diffusion: Option<DiffusionPolicy>,
}

pub fn load_predictor(path: &std::path::Path) -> Result<LearnedPredictor, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read predictor {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

impl ArmKit {
    pub fn new(ctx: Arc<OracleContext>, arm: &ArmSection, noise_scale: f64) -> Result<Self, CliError> {
        let learned = match arm.predictor {
            PredictorKind::Learned => {
                let path = arm
                    .predictor_path
                    .as_ref()
                    .ok_or_else(|| CliError::Config("arm.predictor = \"learned\" needs arm.predictor_path".into()))?;
                let p = load_predictor(path)?;
                if p.classes != ctx.vocab.len() {
                    return Err(CliError::Config(format!(
                        "predictor has {} classes, vocabulary has {}",
                        p.classes,
                        ctx.vocab.len()
                    )));
                }
                Some(p)
            }
            _ => None,
        };
        let diffusion = match arm.policy {
            PolicyKind::Diffusion => {
                let path = arm
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| CliError::Config("arm.policy = \"diffusion\" needs arm.checkpoint".into()))?;
                let (model, sched) = load_checkpoint(path)
                    .map_err(|e| CliError::Runtime(format!("cannot load {}: {e}", path.display())))?;
                Some(DiffusionPolicy::new(Arc::new(model), Arc::new(sched)).with_noise_scale(noise_scale))
            }
            PolicyKind::Follower => None,
        };
        Ok(ArmKit { ctx, arm: arm.clone(), learned, diffusion })
    }

    fn remote(&self) -> Result<motionloop_core::control::RemoteModelClient, ControlError> {
        let r = &self.arm.remote;
        remote_model_client(
            &r.endpoint,
            &r.prompt,
            self.ctx.vocab.clone(),
            Arc::new(NgramEmbedder::default()),
            Duration::from_millis(r.timeout_ms),
        )
    }

    /// Components for the episode with this seed.
    pub fn build(&self, seed: u64) -> Result<Arm, ControlError> {
        let base: Box<dyn MotionPredictor> = match self.arm.predictor {
            PredictorKind::Oracle => Box::new(oracle_predictor(self.ctx.clone())),
            PredictorKind::Learned => Box::new(self.learned.clone().expect("loaded in new")),
            PredictorKind::Remote => Box::new(self.remote()?),
        };
        let mpm: Box<dyn MotionPredictor> = if self.arm.corruption > 0.0 {
            Box::new(faulty_predictor(base, self.arm.corruption, self.ctx.vocab.len(), seed))
        } else {
            base
        };
        let mcm: Option<Box<dyn MotionCorrector>> = match self.arm.corrector {
            CorrectorKind::None => None,
            CorrectorKind::Oracle => Some(Box::new(oracle_corrector(self.ctx.clone(), self.arm.fail_dist))),
            CorrectorKind::Remote => Some(Box::new(self.remote()?)),
        };
        let policy: Box<dyn motionloop_core::control::ChunkPolicy> = match &self.diffusion {
            Some(p) => Box::new(p.clone()),
            None => Box::new(instruction_follower(self.ctx.clone())),
        };
        Ok(Arm { mpm, mcm, policy })
    }

    /// Short method name for reports.
    pub fn label(&self) -> String {
        let p = match self.arm.predictor {
            PredictorKind::Oracle => "oracle",
            PredictorKind::Learned => "learned",
            PredictorKind::Remote => "remote",
        };
        let c = match self.arm.corrector {
            CorrectorKind::None => "none",
            CorrectorKind::Oracle => "oracle",
            CorrectorKind::Remote => "remote",
        };
        let pol = match self.arm.policy {
            PolicyKind::Follower => "follower",
            PolicyKind::Diffusion => "diffusion",
        };
        format!("{pol}/mpm={p}@{}/mcm={c}", self.arm.corruption)
    }
}
