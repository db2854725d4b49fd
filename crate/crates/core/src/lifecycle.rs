//! Correction datasets, the learned motion predictor, lifelong retraining,
//! and the evaluation harness.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotate::{
    gripper_state_before, label_actions, AnnotateError, AnnotationConfig, InstructionId, Vocabulary,
};
use crate::control::{
    history_window, run_episode, ChunkPolicy, Components, ControlError, EpisodeConfig, EpisodeRecord, MotionCorrector,
    MotionPredictor,
};
use crate::nn::{softmax, Linear, Optimizer, OptimizerKind};
use crate::sim::{faulty_predictor, OracleContext, SimConfig, TaskSpec, CUBE, TARGET};
use crate::trajdata::{Action, Observation, Trajectory};

#[derive(Debug, Error)]
pub enum LifecycleError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("invalid correction record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionSource {
    OnlineIntervention,
    OfflineAnnotation,
    ExpertDemo,
}

impl CorrectionSource {
    pub fn short(self) -> &'static str {
        match self {
            CorrectionSource::OnlineIntervention => "online",
            CorrectionSource::OfflineAnnotation => "offline",
            CorrectionSource::ExpertDemo => "expert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub source: CorrectionSource,
    pub task: String,
    /// Episode or trajectory id and period index this record came from.
    pub origin: String,
    pub period: usize,
    pub window: Vec<Observation>,
    pub m_i: InstructionId,
    pub failure: bool,
    #[serde(default)]
    pub semantic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_a: Option<InstructionId>,
}

impl CorrectionRecord {
    pub fn validate(&self, vocab: Option<&Vocabulary>) -> Result<(), LifecycleError> {
        if self.failure != self.m_a.is_some() {
            return Err(LifecycleError::InvalidRecord(format!(
                "{}#{}: m_a must be present exactly when failure is flagged",
                self.origin, self.period
            )));
        }
        if self.window.is_empty() {
            return Err(LifecycleError::InvalidRecord(format!("{}#{}: empty window", self.origin, self.period)));
        }
        if let Some(v) = vocab {
            for id in std::iter::once(self.m_i).chain(self.m_a) {
                if !v.contains(id) {
                    return Err(LifecycleError::InvalidRecord(format!(
                        "{}#{}: instruction {id} not in vocabulary",
                        self.origin, self.period
                    )));
                }
            }
        }
        Ok(())
    }

    /// Instruction that should have been executed.
    pub fn target(&self) -> InstructionId {
        self.m_a.unwrap_or(self.m_i)
    }

    fn class_key(&self) -> String {
        match self.m_a {
            Some(a) if self.failure => format!("fail:{}", a.0),
            _ => "ok".to_string(),
        }
    }
}

/// Window of observations ending at step `t` of a trajectory (inclusive).
fn window_at(traj: &Trajectory, t: usize, history: usize) -> Vec<Observation> {
    let start = (t + 1).saturating_sub(history);
    let obs: Vec<Observation> = traj.steps[start..=t].iter().map(|s| s.obs.clone()).collect();
    history_window(&obs, history)
}

/// Period start windows of an episode, paired with the period's decision.
fn episode_windows(rec: &EpisodeRecord, history: usize) -> Vec<(usize, Vec<Observation>)> {
    rec.decisions
        .iter()
        .filter_map(|d| {
            let t = d.period * rec.chunk;
            (t < rec.trajectory.steps.len()).then(|| (d.period, window_at(&rec.trajectory, t, history)))
        })
        .collect()
}

/// One record per decision of a recorded episode.
pub fn episode_records(rec: &EpisodeRecord, source: CorrectionSource, history: usize) -> Vec<CorrectionRecord> {
    let by_period: BTreeMap<usize, _> = rec.decisions.iter().map(|d| (d.period, d)).collect();
    episode_windows(rec, history)
        .into_iter()
        .map(|(period, window)| {
            let d = by_period[&period];
            CorrectionRecord {
                source,
                task: rec.task.clone(),
                origin: rec.trajectory.id.clone(),
                period,
                window,
                m_i: d.m_i,
                failure: d.failure,
                semantic: d.semantic.clone(),
                m_a: d.m_a,
            }
        })
        .collect()
}

/// Re-assesses every period of a recorded rollout after the fact.
pub fn offline_records(
    rec: &EpisodeRecord,
    reviewer: &mut dyn MotionCorrector,
    history: usize,
) -> Result<Vec<CorrectionRecord>, LifecycleError> {
    let by_period: BTreeMap<usize, _> = rec.decisions.iter().map(|d| (d.period, d)).collect();
    let mut out = Vec::new();
    for (period, window) in episode_windows(rec, history) {
        let m_i = by_period[&period].m_i;
        let verdict = reviewer.assess(&window, m_i)?;
        let m_a = if verdict.failure { Some(reviewer.correct(&window, &verdict.semantic)?) } else { None };
        out.push(CorrectionRecord {
            source: CorrectionSource::OfflineAnnotation,
            task: rec.task.clone(),
            origin: rec.trajectory.id.clone(),
            period,
            window,
            m_i,
            failure: verdict.failure,
            semantic: verdict.semantic,
            m_a,
        });
    }
    Ok(out)
}

/// Annotated periods of a demonstration as failure-free records.
pub fn expert_records(
    traj: &Trajectory,
    annotation: &AnnotationConfig,
    vocab: &Vocabulary,
    history: usize,
) -> Result<Vec<CorrectionRecord>, LifecycleError> {
    let mut out = Vec::new();
    for (period, t) in (0..traj.steps.len()).step_by(annotation.window.max(1)).enumerate() {
        let id = label_at(traj, t, annotation.window, annotation, vocab)?;
        out.push(CorrectionRecord {
            source: CorrectionSource::ExpertDemo,
            task: traj.task.clone(),
            origin: traj.id.clone(),
            period,
            window: window_at(traj, t, history),
            m_i: id,
            failure: false,
            semantic: String::new(),
            m_a: None,
        });
    }
    Ok(out)
}

fn label_at(
    traj: &Trajectory,
    t: usize,
    len: usize,
    annotation: &AnnotationConfig,
    vocab: &Vocabulary,
) -> Result<InstructionId, LifecycleError> {
    let end = (t + len).min(traj.steps.len());
    let acts: Vec<&Action> = traj.steps[t..end].iter().map(|s| &s.act).collect();
    let (_, id) = label_actions(&acts, t, gripper_state_before(traj, t), annotation, vocab)?;
    Ok(id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceConfig {
    /// Largest allowed class size as a multiple of the smallest class.
    pub cap_ratio: usize,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig { cap_ratio: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionManifest {
    pub total: usize,
    pub per_source: BTreeMap<String, usize>,
    /// Keyed by `ok` or `fail:<m_a id>`.
    pub per_class: BTreeMap<String, usize>,
    pub balanced: Option<BalanceConfig>,
}

impl CorrectionManifest {
    fn of(records: &[CorrectionRecord], balanced: Option<BalanceConfig>) -> Self {
        let mut per_source = BTreeMap::new();
        let mut per_class = BTreeMap::new();
        for r in records {
            *per_source.entry(r.source.short().to_string()).or_insert(0) += 1;
            *per_class.entry(r.class_key()).or_insert(0) += 1;
        }
        CorrectionManifest { total: records.len(), per_source, per_class, balanced }
    }

    /// Per-source counts, e.g. `online 3,644 / offline 7,365 / expert 6,378`.
    pub fn summary(&self) -> String {
        [CorrectionSource::OnlineIntervention, CorrectionSource::OfflineAnnotation, CorrectionSource::ExpertDemo]
            .iter()
            .map(|s| format!("{} {}", s.short(), thousands(self.per_source.get(s.short()).copied().unwrap_or(0))))
            .collect::<Vec<_>>()
            .join(" / ")
    }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Validates records and optionally undersamples over-represented
/// `(failure, m_a)` classes. Retained records keep their input order.
pub fn build_correction_dataset(
    records: Vec<CorrectionRecord>,
    balance: Option<BalanceConfig>,
) -> Result<(Vec<CorrectionRecord>, CorrectionManifest), LifecycleError> {
    if records.is_empty() {
        return Err(LifecycleError::EmptyDataset);
    }
    for r in &records {
        r.validate(None)?;
    }
    let Some(cfg) = balance else {
        let manifest = CorrectionManifest::of(&records, None);
        return Ok((records, manifest));
    };
    if cfg.cap_ratio == 0 {
        return Err(LifecycleError::ConfigInvalid("cap_ratio must be at least 1".into()));
    }
    let mut classes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        classes.entry(r.class_key()).or_default().push(i);
    }
    let smallest = classes.values().map(Vec::len).min().unwrap_or(0);
    let cap = smallest * cfg.cap_ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut keep = vec![false; records.len()];
    for idx in classes.values_mut() {
        if idx.len() > cap {
            idx.shuffle(&mut rng);
            idx.truncate(cap);
        }
        for &i in idx.iter() {
            keep[i] = true;
        }
    }
    let kept: Vec<CorrectionRecord> = records.into_iter().zip(keep).filter_map(|(r, k)| k.then_some(r)).collect();
    let manifest = CorrectionManifest::of(&kept, Some(cfg));
    Ok((kept, manifest))
}

pub fn write_records_jsonl(records: &[CorrectionRecord], mut w: impl Write) -> Result<(), LifecycleError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl(r: impl std::io::BufRead) -> Result<Vec<CorrectionRecord>, LifecycleError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Learned motion predictor

pub const PREDICTOR_FEATURES: usize = 31;

/// Hand-crafted features of the newest observation: gripper position and
/// width, a closed flag, object offsets at two scales, and offsets gated by
/// the gripper state.
pub fn predictor_features(window: &[Observation]) -> Vec<f64> {
    let obs = window.last().expect("observation window is never empty");
    let mut f = Vec::with_capacity(PREDICTOR_FEATURES);
    f.extend(obs.eef_pos.iter().map(|v| v * 10.0));
    f.push(obs.gripper_width);
    let closed = if obs.gripper_width < 0.5 { 1.0 } else { 0.0 };
    f.push(closed);
    let mut coarse = Vec::with_capacity(6);
    for name in [CUBE, TARGET] {
        match obs.object_poses.get(name) {
            Some(p) => {
                f.push(1.0);
                let rel: Vec<f64> = (0..3).map(|i| p[i] - obs.eef_pos[i]).collect();
                f.extend(rel.iter().map(|r| r * 10.0));
                f.extend(rel.iter().map(|r| (r / 0.02).clamp(-1.0, 1.0)));
                coarse.extend(rel.iter().map(|r| (r / 0.02).clamp(-1.0, 1.0)));
            }
            None => {
                f.extend([0.0; 7]);
                coarse.extend([0.0; 3]);
            }
        }
    }
    for gate in [closed, 1.0 - closed] {
        f.extend(coarse.iter().map(|c| c * gate));
    }
    debug_assert_eq!(f.len(), PREDICTOR_FEATURES);
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { epochs: 150, lr: 0.02, batch_size: 64, l2: 1e-4, seed: 0 }
    }
}

/// Multinomial logistic regression over `predictor_features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedPredictor {
    pub classes: usize,
    pub seed: u64,
    pub weights: Linear,
    pub train_accuracy: f64,
}

impl LearnedPredictor {
    fn probs_of_features(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.weights.forward(x))
    }

    pub fn probabilities(&self, window: &[Observation]) -> Vec<f64> {
        self.probs_of_features(&predictor_features(window))
    }

    pub fn predict_id(&self, window: &[Observation]) -> InstructionId {
        InstructionId(argmax(&self.probabilities(window)))
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

impl MotionPredictor for LearnedPredictor {
    fn predict(&mut self, window: &[Observation], _task: &str) -> Result<InstructionId, ControlError> {
        Ok(self.predict_id(window))
    }
}

/// `(window, label)` pair used to fit the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: Vec<Observation>,
    pub label: InstructionId,
}

/// Multinomial logistic regression by seeded mini-batch Adam.
pub fn train_predictor(
    data: &[LabeledWindow],
    classes: usize,
    cfg: &PredictorConfig,
) -> Result<LearnedPredictor, LifecycleError> {
    let feats: Vec<Vec<f64>> = data.iter().map(|d| predictor_features(&d.window)).collect();
    let labels: Vec<usize> = data.iter().map(|d| d.label.0).collect();
    train_on_features(&feats, &labels, classes, cfg)
}

pub fn train_on_features(
    feats: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &PredictorConfig,
) -> Result<LearnedPredictor, LifecycleError> {
    if feats.is_empty() {
        return Err(LifecycleError::EmptyDataset);
    }
    if feats.len() != labels.len() {
        return Err(LifecycleError::ConfigInvalid("features and labels differ in length".into()));
    }
    if cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(LifecycleError::ConfigInvalid("batch_size and lr must be positive".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(LifecycleError::ConfigInvalid(format!("label {bad} out of range for {classes} classes")));
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(LifecycleError::DegenerateData(format!("only {} class present", distinct.len())));
    }
    let dim = feats[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = Linear::init(dim, classes, &mut rng);
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut order: Vec<usize> = (0..feats.len()).collect();
    let mut grad = Linear::zeros(dim, classes);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.w.iter_mut().for_each(|g| *g = 0.0);
            grad.b.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut p = softmax(&w.forward(&feats[i]));
                p[labels[i]] -= 1.0;
                p.iter_mut().for_each(|v| *v *= scale);
                w.backward(&feats[i], &p, &mut grad, None);
            }
            for (g, v) in grad.w.iter_mut().zip(&w.w) {
                *g += cfg.l2 * v;
            }
            opt.update(0, &mut w.w, &grad.w, cfg.lr);
            opt.update(1, &mut w.b, &grad.b, cfg.lr);
        }
    }
    let mut model = LearnedPredictor { classes, seed: cfg.seed, weights: w, train_accuracy: 0.0 };
    let correct = feats.iter().zip(labels).filter(|(x, &l)| argmax(&model.probs_of_features(x)) == l).count();
    model.train_accuracy = correct as f64 / feats.len() as f64;
    Ok(model)
}

pub fn accuracy(predictor: &LearnedPredictor, data: &[LabeledWindow]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data.iter().filter(|d| predictor.predict_id(&d.window) == d.label).count();
    hits as f64 / data.len() as f64
}

/// Every step of each trajectory labelled with the annotation of the
/// following `chunk` actions.
pub fn expert_windows(
    trajs: &[Trajectory],
    annotation: &AnnotationConfig,
    vocab: &Vocabulary,
    history: usize,
    chunk: usize,
) -> Result<Vec<LabeledWindow>, LifecycleError> {
    let mut out = Vec::new();
    for traj in trajs {
        for t in 0..traj.steps.len() {
            out.push(LabeledWindow {
                window: window_at(traj, t, history),
                label: label_at(traj, t, chunk, annotation, vocab)?,
            });
        }
    }
    Ok(out)
}

/// Period-start windows of successful episodes labelled with `m_d`.
pub fn refined_windows(records: &[EpisodeRecord], history: usize) -> Vec<LabeledWindow> {
    let mut out = Vec::new();
    for rec in records.iter().filter(|r| r.success) {
        let by_period: BTreeMap<usize, _> = rec.decisions.iter().map(|d| (d.period, d.m_d)).collect();
        for (period, window) in episode_windows(rec, history) {
            out.push(LabeledWindow { window, label: by_period[&period] });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSet {
    pub refined: Vec<EpisodeRecord>,
    pub expert: Vec<Trajectory>,
}

impl MixedSet {
    pub fn len(&self) -> usize {
        self.refined.len() + self.expert.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn windows(
        &self,
        annotation: &AnnotationConfig,
        vocab: &Vocabulary,
        history: usize,
        chunk: usize,
    ) -> Result<Vec<LabeledWindow>, LifecycleError> {
        let mut out = refined_windows(&self.refined, history);
        out.extend(expert_windows(&self.expert, annotation, vocab, history, chunk)?);
        Ok(out)
    }
}

/// All successful refined episodes plus a seeded sample of `expert_count`
/// demonstrations (kept in input order).
pub fn mix_datasets(
    refined: &[EpisodeRecord],
    expert: &[Trajectory],
    expert_count: usize,
    seed: u64,
) -> Result<MixedSet, LifecycleError> {
    if expert_count > expert.len() {
        return Err(LifecycleError::ConfigInvalid(format!(
            "expert_count {expert_count} exceeds the {} available demonstrations",
            expert.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, expert.len(), expert_count).into_vec();
    picked.sort_unstable();
    Ok(MixedSet {
        refined: refined.iter().filter(|r| r.success).cloned().collect(),
        expert: picked.into_iter().map(|i| expert[i].clone()).collect(),
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub tasks: BTreeMap<String, TaskResult>,
    pub trials_per_task: usize,
    /// Trial-weighted mean of the per-task rates.
    pub mean_success: f64,
    pub fingerprint: String,
}

/// Components for one evaluation episode.
pub struct Arm {
    pub mpm: Box<dyn MotionPredictor>,
    pub mcm: Option<Box<dyn MotionCorrector>>,
    pub policy: Box<dyn ChunkPolicy>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSetup {
    pub method: String,
    pub sim: SimConfig,
    /// The per-episode budget is taken from each task's `max_periods`.
    pub episode: EpisodeConfig,
    pub trials: usize,
    pub seed: u64,
}

/// Runs `trials` episodes per task with seeds `seed, seed + 1, ...`.
/// `build` receives the task and the episode seed.
pub fn evaluate<F>(
    tasks: &[TaskSpec],
    setup: &EvalSetup,
    build: F,
) -> Result<(EvalReport, Vec<EpisodeRecord>), LifecycleError>
where
    F: Fn(&TaskSpec, u64) -> Result<Arm, ControlError> + Sync,
{
    if setup.trials == 0 {
        return Err(LifecycleError::ConfigInvalid("trials must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(LifecycleError::ConfigInvalid("no tasks to evaluate".into()));
    }
    let mut results = BTreeMap::new();
    let mut records = Vec::new();
    let (mut succ_total, mut trial_total) = (0usize, 0usize);
    for spec in tasks {
        let cfg = EpisodeConfig { budget: spec.max_periods, ..setup.episode.clone() };
        let recs: Vec<EpisodeRecord> = (0..setup.trials as u64)
            .into_par_iter()
            .map(|i| {
                let seed = setup.seed.wrapping_add(i);
                let mut arm = build(spec, seed)?;
                let parts = Components {
                    mpm: arm.mpm.as_mut(),
                    mcm: arm.mcm.as_deref_mut().map(|m| m as &mut dyn MotionCorrector),
                    policy: arm.policy.as_mut(),
                    hook: None,
                };
                run_episode(spec, &setup.sim, &cfg, seed, parts)
            })
            .collect::<Result<_, _>>()?;
        let successes = recs.iter().filter(|r| r.success).count();
        succ_total += successes;
        trial_total += recs.len();
        results.insert(
            spec.name().to_string(),
            TaskResult { trials: recs.len(), successes, success_rate: successes as f64 / recs.len() as f64 },
        );
        records.extend(recs);
    }
    let fingerprint = {
        let json = serde_json::to_string(&(setup, tasks)).expect("setup serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    };
    let report = EvalReport {
        method: setup.method.clone(),
        tasks: results,
        trials_per_task: setup.trials,
        mean_success: succ_total as f64 / trial_total as f64,
        fingerprint,
    };
    Ok((report, records))
}

/// Table with methods as rows and tasks as columns, plus a mean column.
pub fn write_table_csv(reports: &[EvalReport], mut w: impl Write) -> std::io::Result<()> {
    let mut tasks: Vec<&str> = reports.iter().flat_map(|r| r.tasks.keys().map(String::as_str)).collect();
    tasks.sort_unstable();
    tasks.dedup();
    writeln!(w, "method,{},mean", tasks.join(","))?;
    for r in reports {
        let cells: Vec<String> = tasks
            .iter()
            .map(|t| r.tasks.get(*t).map(|x| format!("{:.4}", x.success_rate)).unwrap_or_default())
            .collect();
        writeln!(w, "{},{},{:.4}", r.method, cells.join(","), r.mean_success)?;
    }
    Ok(())
}

/// Share of decisions whose `m_i` matches the oracle label at the period start.
pub fn instruction_accuracy(records: &[EpisodeRecord], ctx: &OracleContext) -> f64 {
    let (mut hits, mut n) = (0usize, 0usize);
    for rec in records {
        for d in &rec.decisions {
            let t = d.period * rec.chunk;
            if let Some(step) = rec.trajectory.steps.get(t) {
                n += 1;
                if ctx.oracle_instruction(&step.obs) == d.m_i {
                    hits += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Period-start windows of recorded episodes labelled by the oracle.
pub fn oracle_windows(records: &[EpisodeRecord], ctx: &OracleContext, history: usize) -> Vec<LabeledWindow> {
    records
        .iter()
        .flat_map(|rec| episode_windows(rec, history))
        .map(|(_, window)| {
            let label = ctx.oracle_instruction(window.last().expect("non-empty window"));
            LabeledWindow { window, label }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lifelong learning

pub type CorrectorFactory = dyn Fn(u64) -> Box<dyn MotionCorrector> + Sync;
pub type PolicyFactory = dyn Fn(u64) -> Box<dyn ChunkPolicy> + Sync;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LifelongConfig {
    pub expert_count: usize,
    pub rollout_seed: u64,
    /// Probability that a rollout's predictor output is replaced at random.
    pub rollout_corruption: f64,
    pub eval_trials: usize,
    pub eval_seed: u64,
    pub mix_seed: u64,
    pub predictor: PredictorConfig,
    pub episode: EpisodeConfig,
}

impl Default for LifelongConfig {
    fn default() -> Self {
        LifelongConfig {
            expert_count: 20,
            rollout_seed: 10_000,
            rollout_corruption: 0.0,
            eval_trials: 100,
            eval_seed: 50_000,
            mix_seed: 0,
            predictor: PredictorConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

/// Mutable state carried across lifelong iterations.
#[derive(Debug, Clone)]
pub struct LifelongState {
    pub predictor: LearnedPredictor,
    pub refined: Vec<EpisodeRecord>,
    pub rollouts_done: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Baseline,
    Retrained,
    NoSuccessfulRollouts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// Cumulative rollouts collected so far.
    pub rollouts: usize,
    pub new_successes: usize,
    pub refined_total: usize,
    pub status: IterationStatus,
    pub success_rate: f64,
    /// Accuracy on the fixed deployment eval set.
    pub instruction_accuracy: f64,
    /// Accuracy of `m_i` along this iteration's evaluation episodes.
    pub closed_loop_accuracy: f64,
    pub expert_accuracy: f64,
    pub eval: EvalReport,
}

/// Data and components shared by every iteration.
pub struct LifelongEnv<'a> {
    pub ctx: Arc<OracleContext>,
    pub expert: &'a [Trajectory],
    /// Held-out demonstrations for the forgetting check.
    pub expert_eval: &'a [LabeledWindow],
    /// Fixed oracle-labelled deployment states for instruction accuracy.
    pub deployment_eval: &'a [LabeledWindow],
    pub corrector: &'a CorrectorFactory,
    pub policy: &'a PolicyFactory,
}

/// Fixed evaluation states: period starts of uncorrected episodes driven by
/// `predictor` with the given corruption, labelled by the oracle.
pub fn deployment_eval_set(
    ctx: &Arc<OracleContext>,
    predictor: &LearnedPredictor,
    policy: &PolicyFactory,
    corruption: f64,
    episodes: usize,
    seed: u64,
    episode: &EpisodeConfig,
) -> Result<Vec<LabeledWindow>, LifecycleError> {
    let cfg = EpisodeConfig { budget: ctx.spec.max_periods, ..episode.clone() };
    let classes = ctx.vocab.len();
    let records: Vec<EpisodeRecord> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i);
            let mut mpm = faulty_predictor(predictor.clone(), corruption, classes, s);
            let mut pol = policy(s);
            let parts = Components { mpm: &mut mpm, mcm: None, policy: pol.as_mut(), hook: None };
            run_episode(&ctx.spec, &ctx.sim, &cfg, s, parts)
        })
        .collect::<Result<_, _>>()?;
    Ok(oracle_windows(&records, ctx, episode.history))
}

/// Scores the predictor without a corrector.
pub fn assess_predictor(
    env: &LifelongEnv<'_>,
    predictor: &LearnedPredictor,
    cfg: &LifelongConfig,
    rollouts: usize,
    status: IterationStatus,
    new_successes: usize,
    refined_total: usize,
) -> Result<IterationReport, LifecycleError> {
    let setup = EvalSetup {
        method: format!("predictor@{rollouts}"),
        sim: env.ctx.sim.clone(),
        episode: cfg.episode.clone(),
        trials: cfg.eval_trials,
        seed: cfg.eval_seed,
    };
    let (eval, records) = evaluate(std::slice::from_ref(&env.ctx.spec), &setup, |_, seed| {
        Ok(Arm { mpm: Box::new(predictor.clone()), mcm: None, policy: (env.policy)(seed) })
    })?;
    Ok(IterationReport {
        rollouts,
        new_successes,
        refined_total,
        status,
        success_rate: eval.mean_success,
        instruction_accuracy: accuracy(predictor, env.deployment_eval),
        closed_loop_accuracy: instruction_accuracy(&records, &env.ctx),
        expert_accuracy: accuracy(predictor, env.expert_eval),
        eval,
    })
}

/// Collects `rollouts` self-reflection episodes with the corrector on, keeps
/// the successful ones, retrains the predictor on them mixed with expert
/// demonstrations, and evaluates the result. Without new successes the
/// predictor is left unchanged.
pub fn lifelong_iteration(
    env: &LifelongEnv<'_>,
    state: &mut LifelongState,
    rollouts: usize,
    cfg: &LifelongConfig,
) -> Result<IterationReport, LifecycleError> {
    let spec = &env.ctx.spec;
    let ep_cfg = EpisodeConfig { budget: spec.max_periods, ..cfg.episode.clone() };
    let first = state.rollouts_done as u64;
    let classes = env.ctx.vocab.len();
    let episodes: Vec<EpisodeRecord> = (0..rollouts as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.rollout_seed.wrapping_add(first + i);
            let mut mpm = faulty_predictor(state.predictor.clone(), cfg.rollout_corruption, classes, seed);
            let mut mcm = (env.corrector)(seed);
            let mut policy = (env.policy)(seed);
            let parts = Components { mpm: &mut mpm, mcm: Some(mcm.as_mut()), policy: policy.as_mut(), hook: None };
            run_episode(spec, &env.ctx.sim, &ep_cfg, seed, parts)
        })
        .collect::<Result<_, _>>()?;
    state.rollouts_done += rollouts;
    let new_successes = episodes.iter().filter(|r| r.success).count();
    state.refined.extend(episodes.into_iter().filter(|r| r.success));

    let status = if new_successes == 0 {
        IterationStatus::NoSuccessfulRollouts
    } else {
        let mixed = mix_datasets(&state.refined, env.expert, cfg.expert_count, cfg.mix_seed)?;
        let data = mixed.windows(&env.ctx.annotation, &env.ctx.vocab, cfg.episode.history, env.ctx.sim.chunk)?;
        state.predictor = train_predictor(&data, classes, &cfg.predictor)?;
        IterationStatus::Retrained
    };
    assess_predictor(env, &state.predictor, cfg, state.rollouts_done, status, new_successes, state.refined.len())
}

/// Baseline report followed by one iteration per checkpoint in
/// `cumulative_rollouts` (for example `[10, 30]`).
pub fn lifelong_curve(
    env: &LifelongEnv<'_>,
    initial: LearnedPredictor,
    cumulative_rollouts: &[usize],
    cfg: &LifelongConfig,
) -> Result<(LifelongState, Vec<IterationReport>), LifecycleError> {
    let mut state = LifelongState { predictor: initial, refined: Vec::new(), rollouts_done: 0 };
    let mut reports = vec![assess_predictor(env, &state.predictor, cfg, 0, IterationStatus::Baseline, 0, 0)?];
    for &target in cumulative_rollouts {
        if target < state.rollouts_done {
            return Err(LifecycleError::ConfigInvalid("rollout checkpoints must be non-decreasing".into()));
        }
        let n = target - state.rollouts_done;
        if n == 0 {
            continue;
        }
        reports.push(lifelong_iteration(env, &mut state, n, cfg)?);
    }
    Ok((state, reports))
}

pub fn write_curve_csv(reports: &[IterationReport], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "rollouts,success_rate,instruction_accuracy,expert_accuracy,refined,status")?;
    for r in reports {
        writeln!(
            w,
            "{},{:.4},{:.4},{:.4},{},{}",
            r.rollouts,
            r.success_rate,
            r.instruction_accuracy,
            r.expert_accuracy,
            r.refined_total,
            serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
        )?;
    }
    Ok(())
}
