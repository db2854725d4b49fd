//! Dual-process control loop: predict an instruction, assess it, correct it
//! when flagged, then execute one action chunk conditioned on the result.

use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{InstructionId, Vocabulary};
use crate::codebook::{nearest_instruction, TextEmbedder};
use crate::sim::{env_reset, env_step, EnvState, FaultConfig, SimConfig, TaskSpec};
use crate::trajdata::{Action, Observation, Source, Step, Trajectory};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("request to {endpoint} timed out or failed to connect: {reason}")]
    Timeout { endpoint: String, reason: String },
    #[error("protocol error from {endpoint}: {reason}")]
    Protocol { endpoint: String, reason: String },
    #[error("instruction id {0} is not in the vocabulary")]
    InvalidInstruction(usize),
    #[error("predictor failed: {0}")]
    Predictor(String),
    #[error("corrector failed: {0}")]
    Corrector(String),
    #[error("policy failed: {0}")]
    Policy(String),
    #[error("environment fault: {0}")]
    EnvFault(String),
}

pub trait MotionPredictor: Send {
    fn predict(&mut self, window: &[Observation], task: &str) -> Result<InstructionId, ControlError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub failure: bool,
    pub semantic: String,
}

impl Assessment {
    pub fn ok() -> Self {
        Assessment { failure: false, semantic: String::new() }
    }
}

pub trait MotionCorrector: Send {
    fn assess(&mut self, window: &[Observation], proposed: InstructionId) -> Result<Assessment, ControlError>;
    /// Only called after `assess` flagged a failure.
    fn correct(&mut self, window: &[Observation], semantic: &str) -> Result<InstructionId, ControlError>;
}

/// Low-level policy: one chunk of actions per instruction period.
pub trait ChunkPolicy: Send {
    fn act(
        &mut self,
        window: &[Observation],
        task: &str,
        instr: InstructionId,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, ControlError>;
}

impl<T: MotionPredictor + ?Sized> MotionPredictor for Box<T> {
    fn predict(&mut self, window: &[Observation], task: &str) -> Result<InstructionId, ControlError> {
        (**self).predict(window, task)
    }
}

impl<T: MotionCorrector + ?Sized> MotionCorrector for Box<T> {
    fn assess(&mut self, window: &[Observation], proposed: InstructionId) -> Result<Assessment, ControlError> {
        (**self).assess(window, proposed)
    }
    fn correct(&mut self, window: &[Observation], semantic: &str) -> Result<InstructionId, ControlError> {
        (**self).correct(window, semantic)
    }
}

impl<T: ChunkPolicy + ?Sized> ChunkPolicy for Box<T> {
    fn act(
        &mut self,
        window: &[Observation],
        task: &str,
        instr: InstructionId,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, ControlError> {
        (**self).act(window, task, instr, rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDecision {
    pub period: usize,
    pub m_i: InstructionId,
    pub failure: bool,
    pub semantic: String,
    pub m_a: Option<InstructionId>,
    pub m_d: InstructionId,
    /// Number of `correct` invocations made for this period.
    #[serde(default)]
    pub correct_calls: u32,
    /// Set when a human verdict replaced the model's assessment.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub human: bool,
}

impl StepDecision {
    fn accept(period: usize, m_i: InstructionId) -> Self {
        StepDecision {
            period,
            m_i,
            failure: false,
            semantic: String::new(),
            m_a: None,
            m_d: m_i,
            correct_calls: 0,
            human: false,
        }
    }
}

/// One period of the predict / assess / correct loop.
pub fn dual_process_step(
    window: &[Observation],
    task: &str,
    mpm: &mut dyn MotionPredictor,
    mcm: Option<&mut dyn MotionCorrector>,
    period: usize,
) -> Result<StepDecision, ControlError> {
    let m_i = mpm.predict(window, task)?;
    let mut d = StepDecision::accept(period, m_i);
    let Some(mcm) = mcm else {
        return Ok(d);
    };
    let verdict = mcm.assess(window, m_i)?;
    d.semantic = verdict.semantic;
    if verdict.failure {
        let m_a = mcm.correct(window, &d.semantic)?;
        d.failure = true;
        d.correct_calls = 1;
        d.m_a = Some(m_a);
        d.m_d = m_a;
    }
    Ok(d)
}

/// A human reviewer's response at a decision point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanVerdict {
    pub failure: bool,
    #[serde(default)]
    pub semantic: String,
    #[serde(default)]
    pub instruction: Option<InstructionId>,
}

/// Human-in-the-loop hook consulted after the model decision and before the
/// chunk runs. Returning a failure verdict with an instruction overrides
/// `m_d` for that period.
pub trait InterventionHook: Send {
    fn review(&mut self, state: &EnvState, window: &[Observation], decision: &StepDecision) -> Option<HumanVerdict>;

    /// Called after each executed period.
    fn after_period(&mut self, _state: &EnvState, _decision: &StepDecision) {}

    /// Checked before and after each review; `true` ends the episode without
    /// executing the pending chunk.
    fn aborted(&self) -> bool {
        false
    }
}

/// Applies an accepted human verdict. Failure verdicts without an
/// instruction only record the reflection text.
pub fn apply_verdict(decision: &mut StepDecision, verdict: &HumanVerdict) {
    if !verdict.failure {
        return;
    }
    decision.human = true;
    decision.semantic = verdict.semantic.clone();
    if let Some(id) = verdict.instruction {
        decision.failure = true;
        decision.m_a = Some(id);
        decision.m_d = id;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Budget in instruction periods.
    pub budget: usize,
    pub history: usize,
    /// Consult the corrector every this many periods.
    pub assess_every: usize,
    pub faults: FaultConfig,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { budget: 14, history: 5, assess_every: 1, faults: FaultConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub task: String,
    pub chunk: usize,
    pub budget: usize,
    pub trajectory: Trajectory,
    pub decisions: Vec<StepDecision>,
    pub success: bool,
    pub env_steps: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aborted: bool,
}

impl EpisodeRecord {
    pub fn corrections(&self) -> usize {
        self.decisions.iter().filter(|d| d.failure).count()
    }
}

/// Last `h` observations, padded at the front with the oldest one.
pub fn history_window(history: &[Observation], h: usize) -> Vec<Observation> {
    assert!(!history.is_empty(), "history must hold the reset observation");
    let start = history.len().saturating_sub(h);
    let tail = &history[start..];
    let mut out = Vec::with_capacity(h);
    for _ in tail.len()..h {
        out.push(tail[0].clone());
    }
    out.extend_from_slice(tail);
    out
}

/// Per-component seed derived from an episode seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub struct Components<'a> {
    pub mpm: &'a mut dyn MotionPredictor,
    pub mcm: Option<&'a mut dyn MotionCorrector>,
    pub policy: &'a mut dyn ChunkPolicy,
    pub hook: Option<&'a mut dyn InterventionHook>,
}

pub fn run_episode(
    spec: &TaskSpec,
    sim: &SimConfig,
    cfg: &EpisodeConfig,
    seed: u64,
    parts: Components<'_>,
) -> Result<EpisodeRecord, ControlError> {
    if cfg.budget == 0 || cfg.history == 0 {
        return Err(ControlError::EnvFault("budget and history must be at least 1".into()));
    }
    let Components { mpm, mut mcm, policy, mut hook } = parts;
    let (mut state, obs) = env_reset(spec, sim, seed);
    let mut env_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1));
    let mut policy_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 2));
    let mut history = vec![obs];
    let mut steps = Vec::new();
    let mut decisions = Vec::new();
    let mut success = state.is_success(spec, sim);
    let mut aborted = false;

    for period in 0..cfg.budget {
        if success {
            break;
        }
        if hook.as_deref().is_some_and(|h| h.aborted()) {
            aborted = true;
            break;
        }
        let window = history_window(&history, cfg.history);
        let assess = cfg.assess_every <= 1 || period % cfg.assess_every == 0;
        let corrector = if assess { mcm.as_deref_mut().map(|m| m as &mut dyn MotionCorrector) } else { None };
        let mut decision = dual_process_step(&window, spec.name(), mpm, corrector, period)?;
        if let Some(h) = hook.as_deref_mut() {
            if let Some(v) = h.review(&state, &window, &decision) {
                apply_verdict(&mut decision, &v);
            }
            if h.aborted() {
                aborted = true;
                break;
            }
        }
        let chunk = policy.act(&window, spec.name(), decision.m_d, &mut policy_rng)?;
        if chunk.is_empty() {
            return Err(ControlError::Policy("empty action chunk".into()));
        }
        for a in chunk.into_iter().take(sim.chunk) {
            let prev = history.last().expect("non-empty").clone();
            let (o, done) = env_step(&mut state, &a, spec, sim, &cfg.faults, &mut env_rng);
            steps.push(Step { obs: prev, act: a });
            history.push(o);
            if done {
                success = true;
                break;
            }
        }
        if let Some(h) = hook.as_deref_mut() {
            h.after_period(&state, &decision);
        }
        decisions.push(decision);
    }

    let env_steps = steps.len();
    Ok(EpisodeRecord {
        seed,
        task: spec.name().to_string(),
        chunk: sim.chunk,
        budget: cfg.budget,
        trajectory: Trajectory {
            id: format!("{}-rollout-{seed}", spec.name()),
            task: spec.name().to_string(),
            source: Source::Rollout,
            success: Some(success),
            max_step_m: sim.max_step_m,
            steps,
        },
        decisions,
        success,
        env_steps,
        aborted,
    })
}

/// Replays a record against the loop's structural guarantees.
pub fn verify_episode(record: &EpisodeRecord) -> Result<(), String> {
    for d in &record.decisions {
        if d.failure != d.m_a.is_some() {
            return Err(format!("period {}: failure flag {} but m_a {:?}", d.period, d.failure, d.m_a));
        }
        let expected = if d.failure { d.m_a.expect("checked") } else { d.m_i };
        if d.m_d != expected {
            return Err(format!("period {}: m_d {} != {}", d.period, d.m_d, expected));
        }
        if d.correct_calls > 1 || (!d.failure && d.correct_calls > 0) {
            return Err(format!("period {}: correct called {} times", d.period, d.correct_calls));
        }
    }
    for (i, d) in record.decisions.iter().enumerate() {
        if d.period != i {
            return Err(format!("decision {i} carries period {}", d.period));
        }
    }
    if record.decisions.len() > record.budget {
        return Err(format!("{} periods exceed budget {}", record.decisions.len(), record.budget));
    }
    if record.env_steps > record.budget * record.chunk || record.env_steps != record.trajectory.steps.len() {
        return Err(format!("{} env steps exceed {} x {}", record.env_steps, record.budget, record.chunk));
    }
    Ok(())
}

/// Remote predictor/corrector speaking a small JSON protocol over HTTP.
pub struct RemoteModelClient {
    endpoint: String,
    prompt_template: String,
    vocab: Arc<Vocabulary>,
    embedder: Arc<dyn TextEmbedder>,
    min_similarity: f64,
    /// Task of the most recent `predict`, reused by the corrector calls.
    task: String,
    http: reqwest::blocking::Client,
}

#[derive(Debug, Serialize)]
struct RemoteRequest<'a> {
    mode: &'a str,
    task: &'a str,
    obs: &'a Observation,
    #[serde(skip_serializing_if = "Option::is_none")]
    m_i: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    semantic: Option<&'a str>,
    prompt: String,
}

#[derive(Debug, Deserialize)]
struct TextReply {
    text: String,
}

#[derive(Debug, Deserialize)]
struct AssessReply {
    failure: bool,
    #[serde(default)]
    semantic: String,
}

pub fn remote_model_client(
    endpoint_url: &str,
    prompt_template: &str,
    vocab: Arc<Vocabulary>,
    embedder: Arc<dyn TextEmbedder>,
    timeout: Duration,
) -> Result<RemoteModelClient, ControlError> {
    let http = reqwest::blocking::Client::builder()
        .timeout(timeout)
        .connect_timeout(timeout)
        .build()
        .map_err(|e| ControlError::Protocol { endpoint: endpoint_url.into(), reason: e.to_string() })?;
    Ok(RemoteModelClient {
        endpoint: endpoint_url.to_string(),
        prompt_template: prompt_template.to_string(),
        vocab,
        embedder,
        min_similarity: 0.1,
        task: String::new(),
        http,
    })
}

impl RemoteModelClient {
    /// Replies scoring below this cosine against every vocabulary text fall
    /// back to the adjustment instruction.
    pub fn with_min_similarity(mut self, s: f64) -> Self {
        self.min_similarity = s;
        self
    }

    fn render(&self, mode: &str, task: &str, obs: &Observation, m_i: Option<&str>, semantic: Option<&str>) -> String {
        let obs_json = serde_json::to_string(obs).expect("observations serialize");
        self.prompt_template
            .replace("{mode}", mode)
            .replace("{task}", task)
            .replace("{obs}", &obs_json)
            .replace("{m_i}", m_i.unwrap_or(""))
            .replace("{semantic}", semantic.unwrap_or(""))
    }

    fn call<T: serde::de::DeserializeOwned>(
        &self,
        mode: &str,
        window: &[Observation],
        task: &str,
        m_i: Option<&str>,
        semantic: Option<&str>,
    ) -> Result<T, ControlError> {
        let obs = window.last().ok_or_else(|| ControlError::Predictor("empty observation window".into()))?;
        let body =
            RemoteRequest { mode, task, obs, m_i, semantic, prompt: self.render(mode, task, obs, m_i, semantic) };
        let resp = self.http.post(&self.endpoint).json(&body).send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                ControlError::Timeout { endpoint: self.endpoint.clone(), reason: e.to_string() }
            } else {
                ControlError::Protocol { endpoint: self.endpoint.clone(), reason: e.to_string() }
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(ControlError::Protocol { endpoint: self.endpoint.clone(), reason: format!("HTTP {status}") });
        }
        resp.json::<T>().map_err(|e| ControlError::Protocol { endpoint: self.endpoint.clone(), reason: e.to_string() })
    }

    fn resolve_text(&self, text: &str) -> InstructionId {
        let fallback = self.vocab.adjust_id().unwrap_or(InstructionId(0));
        if text.trim().is_empty() {
            log::warn!("empty instruction from {}; using adjustment instruction", self.endpoint);
            return fallback;
        }
        let (id, score) = nearest_instruction(&self.vocab, text, self.embedder.as_ref());
        if score < self.min_similarity {
            log::warn!("unresolvable instruction {text:?} from {}; using adjustment instruction", self.endpoint);
            return fallback;
        }
        id
    }
}

impl MotionPredictor for RemoteModelClient {
    fn predict(&mut self, window: &[Observation], task: &str) -> Result<InstructionId, ControlError> {
        self.task = task.to_string();
        let r: TextReply = self.call("predict", window, task, None, None)?;
        Ok(self.resolve_text(&r.text))
    }
}

impl MotionCorrector for RemoteModelClient {
    fn assess(&mut self, window: &[Observation], proposed: InstructionId) -> Result<Assessment, ControlError> {
        if !self.vocab.contains(proposed) {
            return Err(ControlError::InvalidInstruction(proposed.0));
        }
        let text = self.vocab.text(proposed).to_string();
        let r: AssessReply = self.call("assess", window, &self.task, Some(&text), None)?;
        Ok(Assessment { failure: r.failure, semantic: r.semantic })
    }

    fn correct(&mut self, window: &[Observation], semantic: &str) -> Result<InstructionId, ControlError> {
        let r: TextReply = self.call("correct", window, &self.task, None, Some(semantic))?;
        Ok(self.resolve_text(&r.text))
    }
}
