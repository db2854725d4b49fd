//! Motion-instruction annotation, motion-conditioned diffusion policy, and
//! a predict / assess / correct control loop over a kinematic tabletop world.

pub mod annotate;
pub mod codebook;
pub mod control;
pub mod interface;
pub mod lifecycle;
pub mod nn;
pub mod policy;
pub mod sim;
pub mod trajdata;

pub use annotate::{
    build_vocabulary, AnnotationConfig, GripperState, InstructionId, MotionForm, VocabMode, Vocabulary,
};
pub use codebook::{MotionCodebook, NgramEmbedder, TextEmbedder};
pub use control::{
    dual_process_step, run_episode, ChunkPolicy, Components, EpisodeConfig, EpisodeRecord, MotionCorrector,
    MotionPredictor, StepDecision,
};
pub use interface::{ControlCommand, InterventionEvent, InterventionRequest, Session, SessionConfig, StateSnapshot};
pub use lifecycle::{
    build_correction_dataset, evaluate, Arm, CorrectionRecord, CorrectionSource, EvalReport, LearnedPredictor,
    LifelongConfig,
};
pub use policy::{DiffusionPolicy, NoiseSchedule, PolicyDims, PolicyModel, TrainConfig};
pub use sim::{FaultConfig, SimConfig, TaskKind, TaskSpec};
pub use trajdata::{Action, GripperCmd, Observation, Source, Trajectory};
