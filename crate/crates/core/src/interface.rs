//! Human-in-the-loop session engine behind the intervention service.
//!
//! A worker thread owns the environment and runs episodes through
//! [`run_episode`]; callers talk to it with commands over a channel and read
//! published snapshot copies. At a decision point the worker waits when the
//! step gate is on or the session is paused; an accepted intervention decides
//! that period and the loop continues.

use std::fs::OpenOptions;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{InstructionId, Vocabulary};
use crate::control::{
    run_episode, Components, ControlError, EpisodeConfig, EpisodeRecord, HumanVerdict, InterventionHook,
    MotionCorrector, StepDecision,
};
use crate::lifecycle::{write_records_jsonl, Arm, CorrectionRecord, CorrectionSource};
use crate::sim::{env_reset, EnvSnapshot, EnvState, SimConfig, TaskSpec};
use crate::trajdata::Observation;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("not paused at a decision point")]
    NotAtDecisionPoint,
    #[error("instruction id {0} is not in the vocabulary")]
    InvalidInstruction(usize),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("an episode is already running")]
    EpisodeLive,
    #[error("session worker has stopped")]
    Closed,
}

impl SessionError {
    /// HTTP status used by the service.
    pub fn status(&self) -> u16 {
        match self {
            SessionError::NotAtDecisionPoint | SessionError::EpisodeLive => 409,
            SessionError::InvalidInstruction(_) | SessionError::BadRequest(_) => 400,
            SessionError::Closed => 503,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlCommand {
    Pause,
    Resume,
    Reset,
    Start,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRequest {
    pub command: ControlCommand,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRequest {
    pub failure: bool,
    #[serde(default)]
    pub semantic: String,
    #[serde(default)]
    pub instruction_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionEvent {
    pub episode: u64,
    pub period: usize,
    /// The model's `m_i` shown to the reviewer.
    pub shown: InstructionId,
    pub failure: bool,
    pub semantic: String,
    /// Executed instruction: the reviewer's pick, or `shown` when accepted.
    pub chosen: InstructionId,
    pub timestamp_ms: u64,
}

/// Log entry: the event plus what is needed to export it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedIntervention {
    pub event: InterventionEvent,
    pub task: String,
    pub origin: String,
    pub window: Vec<Observation>,
}

/// One `OnlineIntervention` record per event, ordered by (episode, period).
pub fn export_corrections(log: &[LoggedIntervention]) -> Vec<CorrectionRecord> {
    let mut sorted: Vec<&LoggedIntervention> = log.iter().collect();
    sorted.sort_by_key(|l| (l.event.episode, l.event.period));
    sorted
        .into_iter()
        .map(|l| CorrectionRecord {
            source: CorrectionSource::OnlineIntervention,
            task: l.task.clone(),
            origin: l.origin.clone(),
            period: l.event.period,
            window: l.window.clone(),
            m_i: l.event.shown,
            failure: l.event.failure,
            semantic: l.event.semantic.clone(),
            m_a: l.event.failure.then_some(l.event.chosen),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Running,
    AtDecision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionView {
    pub period: usize,
    pub m_i: InstructionId,
    pub m_i_text: String,
    pub failure: bool,
    pub semantic: String,
    pub m_a: Option<InstructionId>,
    pub m_d: InstructionId,
    pub m_d_text: String,
    pub human: bool,
}

impl DecisionView {
    fn of(d: &StepDecision, vocab: &Vocabulary) -> Self {
        DecisionView {
            period: d.period,
            m_i: d.m_i,
            m_i_text: vocab.text(d.m_i).to_string(),
            failure: d.failure,
            semantic: d.semantic.clone(),
            m_a: d.m_a,
            m_d: d.m_d,
            m_d_text: vocab.text(d.m_d).to_string(),
            human: d.human,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub seed: u64,
    pub success: bool,
    pub aborted: bool,
    pub periods: usize,
    pub env_steps: usize,
    pub interventions: usize,
}

/// Body of `GET /api/state` and of every stream message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub session: String,
    /// Increases with every published snapshot.
    pub revision: u64,
    pub status: SessionStatus,
    pub paused: bool,
    pub step_gate: bool,
    pub task: String,
    pub budget: usize,
    /// Episodes started in this session; the live one is the last.
    pub episode: u64,
    pub seed: Option<u64>,
    pub period: usize,
    pub env: Option<EnvSnapshot>,
    /// The newest observation as the models see it.
    pub observation: Option<Observation>,
    pub pending: Option<DecisionView>,
    pub history: Vec<DecisionView>,
    pub interventions: Vec<InterventionEvent>,
    pub last_result: Option<EpisodeSummary>,
    pub last_error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub id: String,
    pub task: TaskSpec,
    pub sim: SimConfig,
    pub episode: EpisodeConfig,
    /// Wait at every decision point.
    pub step_gate: bool,
    /// Wall-clock length of one period when the gate is off.
    pub period_ms: u64,
    /// Episode `n` (from 0) uses `seed + n`.
    pub seed: u64,
    /// Append exported correction records to this JSONL file.
    pub export_path: Option<PathBuf>,
}

pub type ArmFactory = Box<dyn FnMut(u64) -> Result<Arm, ControlError> + Send>;

enum Msg {
    Control(ControlCommand, Sender<Result<(), SessionError>>),
    Intervene(InterventionRequest, Sender<Result<InterventionEvent, SessionError>>),
    Shutdown,
}

struct Shared {
    snapshot: RwLock<Arc<StateSnapshot>>,
    subscribers: Mutex<Vec<Sender<Arc<StateSnapshot>>>>,
    corrections: Mutex<Vec<CorrectionRecord>>,
    episodes: Mutex<Vec<EpisodeRecord>>,
}

/// Handle to a running session worker.
pub struct Session {
    tx: Sender<Msg>,
    shared: Arc<Shared>,
    vocab: Arc<Vocabulary>,
    worker: Option<JoinHandle<()>>,
}

impl Session {
    pub fn spawn(cfg: SessionConfig, vocab: Arc<Vocabulary>, factory: ArmFactory) -> Session {
        let initial = StateSnapshot {
            session: cfg.id.clone(),
            revision: 0,
            status: SessionStatus::Idle,
            paused: false,
            step_gate: cfg.step_gate,
            task: cfg.task.name().to_string(),
            budget: cfg.episode.budget,
            episode: 0,
            seed: None,
            period: 0,
            env: None,
            observation: None,
            pending: None,
            history: Vec::new(),
            interventions: Vec::new(),
            last_result: None,
            last_error: None,
        };
        let shared = Arc::new(Shared {
            snapshot: RwLock::new(Arc::new(initial.clone())),
            subscribers: Mutex::new(Vec::new()),
            corrections: Mutex::new(Vec::new()),
            episodes: Mutex::new(Vec::new()),
        });
        let (tx, rx) = mpsc::channel();
        let core = Core {
            cfg,
            vocab: vocab.clone(),
            rx,
            shared: shared.clone(),
            snap: initial,
            log: Vec::new(),
            pending: None,
            abort: false,
            shutdown: false,
        };
        let worker = std::thread::Builder::new()
            .name("session".into())
            .spawn(move || worker_loop(core, factory))
            .expect("spawn session worker");
        Session { tx, shared, vocab, worker: Some(worker) }
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    /// Most recently published snapshot.
    pub fn state(&self) -> Arc<StateSnapshot> {
        self.shared.snapshot.read().expect("snapshot lock").clone()
    }

    /// Receives every snapshot published after this call.
    pub fn subscribe(&self) -> Receiver<Arc<StateSnapshot>> {
        let (tx, rx) = mpsc::channel();
        self.shared.subscribers.lock().expect("subscriber lock").push(tx);
        rx
    }

    pub fn control(&self, cmd: ControlCommand) -> Result<(), SessionError> {
        let (tx, rx) = mpsc::channel();
        self.tx.send(Msg::Control(cmd, tx)).map_err(|_| SessionError::Closed)?;
        rx.recv().map_err(|_| SessionError::Closed)?
    }

    pub fn intervene(&self, req: InterventionRequest) -> Result<InterventionEvent, SessionError> {
        if let Some(id) = req.instruction_id {
            if !self.vocab.contains(InstructionId(id)) {
                return Err(SessionError::InvalidInstruction(id));
            }
        }
        let (tx, rx) = mpsc::channel();
        self.tx.send(Msg::Intervene(req, tx)).map_err(|_| SessionError::Closed)?;
        rx.recv().map_err(|_| SessionError::Closed)?
    }

    /// Correction records flushed from finished episodes.
    pub fn corrections(&self) -> Vec<CorrectionRecord> {
        self.shared.corrections.lock().expect("corrections lock").clone()
    }

    pub fn episodes(&self) -> Vec<EpisodeRecord> {
        self.shared.episodes.lock().expect("episodes lock").clone()
    }

    /// Blocks until a published snapshot satisfies `pred` or the timeout
    /// passes. Returns the matching snapshot.
    pub fn wait_for(&self, timeout: Duration, pred: impl Fn(&StateSnapshot) -> bool) -> Option<Arc<StateSnapshot>> {
        let rx = self.subscribe();
        let current = self.state();
        if pred(&current) {
            return Some(current);
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.checked_duration_since(Instant::now())?;
            match rx.recv_timeout(left) {
                Ok(s) if pred(&s) => return Some(s),
                Ok(_) => {}
                Err(_) => return None,
            }
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let _ = self.tx.send(Msg::Shutdown);
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.stop();
    }
}

struct Pending {
    decision: StepDecision,
    window: Vec<Observation>,
}

struct Core {
    cfg: SessionConfig,
    vocab: Arc<Vocabulary>,
    rx: Receiver<Msg>,
    shared: Arc<Shared>,
    snap: StateSnapshot,
    /// Events of the live episode.
    log: Vec<LoggedIntervention>,
    pending: Option<Pending>,
    abort: bool,
    shutdown: bool,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl Core {
    fn publish(&mut self) {
        self.snap.revision += 1;
        let snap = Arc::new(self.snap.clone());
        *self.shared.snapshot.write().expect("snapshot lock") = snap.clone();
        self.shared.subscribers.lock().expect("subscriber lock").retain(|s| s.send(snap.clone()).is_ok());
    }

    fn at_decision(&self) -> bool {
        self.pending.is_some() && self.snap.status == SessionStatus::AtDecision
    }

    /// Handles a command outside of a decision wait. Returns `true` when the
    /// caller should stop waiting.
    fn handle_async(&mut self, msg: Msg, live: bool) -> bool {
        match msg {
            Msg::Control(cmd, reply) => {
                let r = match cmd {
                    ControlCommand::Pause => {
                        self.snap.paused = true;
                        Ok(())
                    }
                    ControlCommand::Resume => {
                        self.snap.paused = false;
                        Ok(())
                    }
                    ControlCommand::Reset => {
                        if live {
                            self.abort = true;
                        } else {
                            self.reset_view();
                        }
                        Ok(())
                    }
                    ControlCommand::Start if live => Err(SessionError::EpisodeLive),
                    ControlCommand::Start => Ok(()),
                };
                let start = cmd == ControlCommand::Start && r.is_ok();
                let _ = reply.send(r);
                if !start {
                    self.publish();
                }
                start
            }
            Msg::Intervene(_, reply) => {
                let _ = reply.send(Err(SessionError::NotAtDecisionPoint));
                false
            }
            Msg::Shutdown => {
                self.shutdown = true;
                self.abort = true;
                true
            }
        }
    }

    fn reset_view(&mut self) {
        self.snap.status = SessionStatus::Idle;
        self.snap.env = None;
        self.snap.observation = None;
        self.snap.pending = None;
        self.snap.history.clear();
        self.snap.period = 0;
        self.snap.seed = None;
    }

    fn accept(&mut self, req: InterventionRequest) -> Result<(HumanVerdict, InterventionEvent), SessionError> {
        if !self.at_decision() {
            return Err(SessionError::NotAtDecisionPoint);
        }
        let pending = self.pending.as_ref().expect("checked");
        let m_i = pending.decision.m_i;
        let chosen = if req.failure {
            let id = req
                .instruction_id
                .ok_or_else(|| SessionError::BadRequest("a failure verdict needs instruction_id".into()))?;
            InstructionId(id)
        } else {
            match req.instruction_id {
                Some(id) if id != m_i.0 => {
                    return Err(SessionError::BadRequest("instruction_id given without a failure verdict".into()))
                }
                _ => m_i,
            }
        };
        if !self.vocab.contains(chosen) {
            return Err(SessionError::InvalidInstruction(chosen.0));
        }
        let event = InterventionEvent {
            episode: self.snap.episode,
            period: pending.decision.period,
            shown: m_i,
            failure: req.failure,
            semantic: req.semantic.clone(),
            chosen,
            timestamp_ms: now_ms(),
        };
        self.log.push(LoggedIntervention {
            event: event.clone(),
            task: self.cfg.task.name().to_string(),
            origin: format!("{}-ep{}", self.cfg.id, self.snap.episode),
            window: pending.window.clone(),
        });
        self.snap.interventions.push(event.clone());
        let verdict = HumanVerdict { failure: req.failure, semantic: req.semantic, instruction: Some(chosen) };
        Ok((verdict, event))
    }

    fn wait_at_decision(&mut self) -> Option<HumanVerdict> {
        self.snap.status = SessionStatus::AtDecision;
        self.publish();
        loop {
            let Ok(msg) = self.rx.recv() else {
                self.abort = true;
                return None;
            };
            match msg {
                Msg::Control(ControlCommand::Pause, reply) => {
                    self.snap.paused = true;
                    let _ = reply.send(Ok(()));
                    self.publish();
                }
                Msg::Control(ControlCommand::Resume, reply) => {
                    self.snap.paused = false;
                    let _ = reply.send(Ok(()));
                    return None;
                }
                Msg::Control(ControlCommand::Reset, reply) => {
                    self.abort = true;
                    let _ = reply.send(Ok(()));
                    return None;
                }
                Msg::Control(ControlCommand::Start, reply) => {
                    let _ = reply.send(Err(SessionError::EpisodeLive));
                }
                Msg::Intervene(req, reply) => match self.accept(req) {
                    Ok((verdict, event)) => {
                        let _ = reply.send(Ok(event));
                        return Some(verdict);
                    }
                    Err(e) => {
                        let _ = reply.send(Err(e));
                    }
                },
                Msg::Shutdown => {
                    self.shutdown = true;
                    self.abort = true;
                    return None;
                }
            }
        }
    }

    fn finish(&mut self, rec: EpisodeRecord) {
        let records = export_corrections(&self.log);
        if let Some(path) = &self.cfg.export_path {
            let written = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| e.to_string())
                .and_then(|f| write_records_jsonl(&records, f).map_err(|e| e.to_string()));
            if let Err(e) = written {
                log::error!("exporting corrections to {}: {e}", path.display());
                self.snap.last_error = Some(format!("export failed: {e}"));
            }
        }
        self.snap.last_result = Some(EpisodeSummary {
            episode: self.snap.episode,
            seed: rec.seed,
            success: rec.success,
            aborted: rec.aborted,
            periods: rec.decisions.len(),
            env_steps: rec.env_steps,
            interventions: records.len(),
        });
        self.shared.corrections.lock().expect("corrections lock").extend(records);
        self.shared.episodes.lock().expect("episodes lock").push(rec);
        self.log.clear();
        self.pending = None;
        self.snap.pending = None;
        self.snap.status = SessionStatus::Idle;
    }
}

struct Gate<'a> {
    core: &'a mut Core,
}

impl InterventionHook for Gate<'_> {
    fn review(&mut self, state: &EnvState, window: &[Observation], decision: &StepDecision) -> Option<HumanVerdict> {
        let core = &mut *self.core;
        core.snap.env = Some(state.snapshot(&core.cfg.sim));
        core.snap.observation = window.last().cloned();
        core.snap.period = decision.period;
        core.snap.pending = Some(DecisionView::of(decision, &core.vocab));
        core.pending = Some(Pending { decision: decision.clone(), window: window.to_vec() });
        while let Ok(msg) = core.rx.try_recv() {
            core.handle_async(msg, true);
        }
        if core.abort {
            return None;
        }
        if core.cfg.step_gate || core.snap.paused {
            core.wait_at_decision()
        } else {
            core.snap.status = SessionStatus::Running;
            core.publish();
            None
        }
    }

    fn after_period(&mut self, state: &EnvState, decision: &StepDecision) {
        let core = &mut *self.core;
        core.pending = None;
        core.snap.pending = None;
        core.snap.status = SessionStatus::Running;
        core.snap.env = Some(state.snapshot(&core.cfg.sim));
        core.snap.observation = Some(state.observation(&core.cfg.sim));
        core.snap.history.push(DecisionView::of(decision, &core.vocab));
        core.publish();
        if core.cfg.step_gate || core.cfg.period_ms == 0 {
            return;
        }
        let deadline = Instant::now() + Duration::from_millis(core.cfg.period_ms);
        while !core.abort {
            let Some(left) = deadline.checked_duration_since(Instant::now()) else { break };
            match core.rx.recv_timeout(left) {
                Ok(msg) => {
                    core.handle_async(msg, true);
                }
                Err(RecvTimeoutError::Timeout) => break,
                Err(RecvTimeoutError::Disconnected) => {
                    core.abort = true;
                    core.shutdown = true;
                }
            }
        }
    }

    fn aborted(&self) -> bool {
        self.core.abort
    }
}

fn worker_loop(mut core: Core, mut factory: ArmFactory) {
    let mut started: u64 = 0;
    while !core.shutdown {
        let Ok(msg) = core.rx.recv() else { break };
        if !core.handle_async(msg, false) || core.shutdown {
            continue;
        }
        let seed = core.cfg.seed.wrapping_add(started);
        started += 1;
        core.abort = false;
        core.reset_view();
        core.snap.episode = started;
        core.snap.seed = Some(seed);
        core.snap.last_error = None;
        let mut arm = match factory(seed) {
            Ok(a) => a,
            Err(e) => {
                core.snap.last_error = Some(e.to_string());
                core.publish();
                continue;
            }
        };
        let (state, obs) = env_reset(&core.cfg.task, &core.cfg.sim, seed);
        core.snap.env = Some(state.snapshot(&core.cfg.sim));
        core.snap.observation = Some(obs);
        core.snap.status = SessionStatus::Running;
        core.publish();
        let task = core.cfg.task.clone();
        let sim = core.cfg.sim.clone();
        let ep_cfg = core.cfg.episode.clone();
        let result = {
            let mut gate = Gate { core: &mut core };
            let parts = Components {
                mpm: arm.mpm.as_mut(),
                mcm: arm.mcm.as_deref_mut().map(|m| m as &mut dyn MotionCorrector),
                policy: arm.policy.as_mut(),
                hook: Some(&mut gate),
            };
            run_episode(&task, &sim, &ep_cfg, seed, parts)
        };
        match result {
            Ok(rec) => core.finish(rec),
            Err(e) => {
                log::error!("episode {started} failed: {e}");
                core.log.clear();
                core.pending = None;
                core.reset_view();
                core.snap.last_error = Some(e.to_string());
            }
        }
        core.publish();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{build_vocabulary, AnnotationConfig, VocabMode};
    use crate::lifecycle::build_correction_dataset;
    use crate::sim::{faulty_predictor, instruction_follower, oracle_predictor, OracleContext};

    const WAIT: Duration = Duration::from_secs(20);

    fn ctx() -> Arc<OracleContext> {
        let annotation = AnnotationConfig::default();
        let vocab = Arc::new(build_vocabulary(&annotation, VocabMode::Combined).unwrap());
        Arc::new(OracleContext::new(TaskSpec::pick_place(), SimConfig::default(), annotation, vocab))
    }

    fn session(c: &Arc<OracleContext>, gate: bool, corruption: f64) -> Session {
        let cfg = SessionConfig {
            id: "t".into(),
            task: c.spec.clone(),
            sim: c.sim.clone(),
            episode: EpisodeConfig { budget: c.spec.max_periods, ..Default::default() },
            step_gate: gate,
            period_ms: 0,
            seed: 11,
            export_path: None,
        };
        let c2 = c.clone();
        let vocab_len = c.vocab.len();
        let factory: ArmFactory = Box::new(move |seed| {
            Ok(Arm {
                mpm: Box::new(faulty_predictor(oracle_predictor(c2.clone()), corruption, vocab_len, seed)),
                mcm: None,
                policy: Box::new(instruction_follower(c2.clone())),
            })
        });
        Session::spawn(cfg, c.vocab.clone(), factory)
    }

    fn at_decision(s: &StateSnapshot) -> bool {
        s.status == SessionStatus::AtDecision
    }

    #[test]
    fn intervention_outside_a_decision_point_conflicts() {
        let c = ctx();
        let s = session(&c, true, 0.0);
        let req = InterventionRequest { failure: true, semantic: String::new(), instruction_id: Some(1) };
        assert_eq!(s.intervene(req.clone()).unwrap_err().status(), 409);
        let bad = InterventionRequest { instruction_id: Some(999), ..req };
        assert_eq!(s.intervene(bad).unwrap_err().status(), 400);
    }

    #[test]
    fn accepted_instruction_becomes_m_d() {
        let c = ctx();
        let s = session(&c, true, 0.0);
        s.control(ControlCommand::Start).unwrap();
        let snap = s.wait_for(WAIT, at_decision).expect("decision point");
        assert_eq!(s.control(ControlCommand::Start).unwrap_err().status(), 409);
        let shown = snap.pending.as_ref().unwrap().m_i;
        let chosen = c.vocab.find_text("move arm upward with gripper open").unwrap();
        assert_ne!(shown, chosen);
        let req = InterventionRequest { failure: true, semantic: "go up first".into(), instruction_id: Some(chosen.0) };
        let ev = s.intervene(req).unwrap();
        assert_eq!((ev.period, ev.shown, ev.chosen), (0, shown, chosen));
        s.wait_for(WAIT, |x| at_decision(x) && x.period == 1).expect("next decision");
        s.control(ControlCommand::Reset).unwrap();
        s.wait_for(WAIT, |x| x.status == SessionStatus::Idle && x.last_result.is_some()).expect("idle");
        let eps = s.episodes();
        assert!(eps[0].aborted);
        assert_eq!(eps[0].decisions[0].m_d, chosen);
        assert!(eps[0].decisions[0].human);
        let recs = s.corrections();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].m_a, Some(chosen));
    }

    #[test]
    fn oracle_client_reaches_oracle_success() {
        let c = ctx();
        let s = session(&c, true, 1.0);
        let rx = s.subscribe();
        let mut successes = 0;
        for _ in 0..3 {
            s.control(ControlCommand::Start).unwrap();
            loop {
                let snap = rx.recv_timeout(WAIT).expect("snapshot");
                if let Some(r) = snap.last_result.as_ref().filter(|r| r.episode == snap.episode) {
                    if snap.status == SessionStatus::Idle {
                        successes += r.success as usize;
                        break;
                    }
                }
                if !at_decision(&snap) {
                    continue;
                }
                let obs = snap.observation.as_ref().unwrap();
                let want = c.oracle_instruction(obs);
                let shown = snap.pending.as_ref().unwrap().m_i;
                let req = if want == shown {
                    InterventionRequest { failure: false, semantic: String::new(), instruction_id: None }
                } else {
                    InterventionRequest { failure: true, semantic: String::new(), instruction_id: Some(want.0) }
                };
                s.intervene(req).unwrap();
            }
        }
        assert_eq!(successes, 3);
        let recs = s.corrections();
        assert!(!recs.is_empty());
        let (kept, _) = build_correction_dataset(recs.clone(), None).unwrap();
        assert_eq!(kept, recs);
        for w in recs.windows(2) {
            if w[0].origin == w[1].origin {
                assert!(w[0].period < w[1].period);
            }
        }
        for ep in s.episodes() {
            assert!(ep.decisions.iter().all(|d| d.human));
        }
    }

    #[test]
    fn paced_mode_pauses_at_the_next_decision() {
        let c = ctx();
        let s = session(&c, false, 0.0);
        s.control(ControlCommand::Pause).unwrap();
        s.control(ControlCommand::Start).unwrap();
        let snap = s.wait_for(WAIT, at_decision).expect("paused at decision");
        assert!(snap.paused && snap.period == 0);
        let req = InterventionRequest { failure: false, semantic: String::new(), instruction_id: None };
        s.intervene(req).unwrap();
        let snap = s.wait_for(WAIT, |x| at_decision(x) && x.period == 1).expect("held at next decision");
        assert_eq!(snap.history.len(), 1);
        s.control(ControlCommand::Resume).unwrap();
        let done = s.wait_for(WAIT, |x| x.status == SessionStatus::Idle && x.last_result.is_some()).unwrap();
        assert!(done.last_result.as_ref().unwrap().success);
    }

    #[test]
    fn empty_log_exports_nothing() {
        assert!(export_corrections(&[]).is_empty());
    }
}
