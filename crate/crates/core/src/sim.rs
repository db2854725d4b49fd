//! Kinematic tabletop world: a point gripper, cubes, and target markers.
//!
//! No dynamics or collisions. A closed gripper within the grasp radius of a
//! cube attaches it; the held cube follows the gripper exactly. Released
//! cubes drop onto the table or onto the stacking base below them.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotate::{label_actions, AnnotationConfig, GripperState, InstructionId, MotionForm, Sign, Vocabulary};
use crate::control::{Assessment, ChunkPolicy, ControlError, MotionCorrector, MotionPredictor};
use crate::trajdata::{Action, GripperCmd, Observation, Source, Step, Trajectory, Vec3, Workspace};

pub const CUBE: &str = "cube";
pub const BASE: &str = "base";
pub const TARGET: &str = "target";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Reach,
    PickPlace,
    StackTwo,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reach => "reach",
            TaskKind::PickPlace => "pick_place",
            TaskKind::StackTwo => "stack_two",
        }
    }

    pub fn parse(name: &str) -> Option<TaskKind> {
        match name {
            "reach" => Some(TaskKind::Reach),
            "pick_place" => Some(TaskKind::PickPlace),
            "stack_two" => Some(TaskKind::StackTwo),
            _ => None,
        }
    }
}

/// Sampling distribution for an initial pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Point(Vec3),
    Box { min: Vec3, max: Vec3 },
}

impl Region {
    pub fn sample(&self, rng: &mut impl Rng) -> Vec3 {
        match *self {
            Region::Point(p) => p,
            Region::Box { min, max } => {
                let mut p = [0.0; 3];
                for i in 0..3 {
                    p[i] = if max[i] > min[i] { rng.random_range(min[i]..=max[i]) } else { min[i] };
                }
                p
            }
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Region::Point(q) => p == q,
            Region::Box { min, max } => (0..3).all(|i| p[i] >= min[i] && p[i] <= max[i]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Initial cube pose (unused by Reach).
    pub cube: Region,
    /// Reach goal, PickPlace drop-off, or StackTwo base pose.
    pub goal: Region,
    pub success_tol: f64,
    /// Episode budget in instruction periods.
    pub max_periods: usize,
}

impl TaskSpec {
    pub fn reach() -> Self {
        TaskSpec {
            kind: TaskKind::Reach,
            cube: Region::Point([0.0, 0.0, 0.02]),
            goal: Region::Box { min: [-0.12, -0.12, 0.04], max: [0.12, 0.12, 0.2] },
            success_tol: 0.01,
            max_periods: 8,
        }
    }

    pub fn pick_place() -> Self {
        TaskSpec {
            kind: TaskKind::PickPlace,
            cube: Region::Box { min: [-0.12, -0.08, 0.02], max: [-0.04, 0.08, 0.02] },
            goal: Region::Box { min: [0.04, -0.08, 0.02], max: [0.12, 0.08, 0.02] },
            success_tol: 0.02,
            max_periods: 14,
        }
    }

    pub fn stack_two() -> Self {
        TaskSpec {
            kind: TaskKind::StackTwo,
            cube: Region::Box { min: [-0.12, -0.08, 0.02], max: [-0.04, 0.08, 0.02] },
            goal: Region::Box { min: [0.04, -0.08, 0.02], max: [0.12, 0.08, 0.02] },
            success_tol: 0.015,
            max_periods: 14,
        }
    }

    pub fn by_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Reach => TaskSpec::reach(),
            TaskKind::PickPlace => TaskSpec::pick_place(),
            TaskKind::StackTwo => TaskSpec::stack_two(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Same task with the cube's initial pose drawn from a rectangle instead
    /// of its nominal distribution.
    pub fn with_cube_region(mut self, region: Region) -> Self {
        self.cube = region;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultConfig {
    /// Std-dev of per-component displacement noise, meters.
    pub action_noise: f64,
    /// Per-step probability that a held cube slips out.
    pub slip_prob: f64,
    /// Probability that a faulty predictor replaces its output.
    pub predictor_corruption: f64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig { action_noise: 0.0, slip_prob: 0.0, predictor_corruption: 0.0 }
    }
}

impl FaultConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.action_noise.is_nan() || self.action_noise < 0.0 {
            return Err(format!("action_noise {} < 0", self.action_noise));
        }
        for (name, p) in [("slip_prob", self.slip_prob), ("predictor_corruption", self.predictor_corruption)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} {p} not in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub workspace: Workspace,
    pub max_step_m: f64,
    pub grasp_radius: f64,
    pub home: Vec3,
    pub carry_height: f64,
    pub cube_size: f64,
    /// Actions per instruction period.
    pub chunk: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            workspace: Workspace::default(),
            max_step_m: 0.02,
            grasp_radius: 0.015,
            home: [0.0, 0.0, 0.15],
            carry_height: 0.12,
            cube_size: 0.04,
            chunk: 4,
        }
    }
}

impl SimConfig {
    fn table_z(&self) -> f64 {
        self.cube_size / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub name: String,
    pub pos: Vec3,
    pub graspable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Grasp,
    Lift,
    Transport,
    Lower,
    Release,
    Done,
}

impl Phase {
    pub fn index(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub task: TaskKind,
    pub gripper_pos: Vec3,
    pub gripper_open: bool,
    /// Index into `objects`.
    pub held: Option<usize>,
    pub objects: Vec<SimObject>,
    pub step: usize,
}

impl EnvState {
    fn object(&self, name: &str) -> Option<&SimObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    fn cube_index(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.name == CUBE)
    }

    /// Where the cube (or, for Reach, the gripper) must end up.
    pub fn target(&self, cfg: &SimConfig) -> Vec3 {
        match self.task {
            TaskKind::StackTwo => {
                let b = self.object(BASE).map(|o| o.pos).unwrap_or([0.0; 3]);
                [b[0], b[1], b[2] + cfg.cube_size]
            }
            _ => self.object(TARGET).map(|o| o.pos).unwrap_or([0.0; 3]),
        }
    }

    pub fn gripper_width(&self) -> f64 {
        match (self.gripper_open, self.held) {
            (true, _) => 1.0,
            (false, Some(_)) => 0.4,
            (false, None) => 0.0,
        }
    }

    pub fn is_success(&self, spec: &TaskSpec, cfg: &SimConfig) -> bool {
        let target = self.target(cfg);
        match spec.kind {
            TaskKind::Reach => dist(&self.gripper_pos, &target) < spec.success_tol,
            TaskKind::PickPlace | TaskKind::StackTwo => match self.object(CUBE) {
                Some(c) => self.held.is_none() && dist(&c.pos, &target) < spec.success_tol,
                None => false,
            },
        }
    }

    pub fn observation(&self, cfg: &SimConfig) -> Observation {
        let mut objects = BTreeMap::new();
        for o in &self.objects {
            if o.name != TARGET {
                objects.insert(o.name.clone(), o.pos);
            }
        }
        if self.task != TaskKind::Reach || self.object(TARGET).is_some() {
            objects.insert(TARGET.to_string(), self.target(cfg));
        }
        Observation {
            eef_pos: self.gripper_pos,
            gripper_width: self.gripper_width(),
            object_poses: objects,
            task_phase_hint: Some(expert_step(self, cfg).1.index()),
        }
    }

    /// Rebuilds the simulator state an observation was taken from. Used by
    /// the scripted oracles, which plan on a noise-free copy of the world.
    pub fn from_observation(obs: &Observation, task: TaskKind) -> EnvState {
        let mut objects = Vec::new();
        for (name, pos) in &obs.object_poses {
            if task == TaskKind::StackTwo && name == TARGET {
                continue;
            }
            objects.push(SimObject { name: name.clone(), pos: *pos, graspable: name == CUBE });
        }
        let gripper_open = obs.gripper_width >= 0.999;
        let holding = !gripper_open && obs.gripper_width > 0.0;
        let mut state = EnvState { task, gripper_pos: obs.eef_pos, gripper_open, held: None, objects, step: 0 };
        if holding {
            state.held = state.cube_index();
        }
        state
    }

    pub fn snapshot(&self, cfg: &SimConfig) -> EnvSnapshot {
        EnvSnapshot {
            task: self.task.name().to_string(),
            step: self.step,
            eef_pos: self.gripper_pos,
            gripper_open: self.gripper_open,
            held: self.held.map(|i| self.objects[i].name.clone()),
            objects: self.objects.iter().map(|o| (o.name.clone(), o.pos)).collect(),
            target: self.target(cfg),
        }
    }
}

/// JSON view of the world published to the intervention UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub task: String,
    pub step: usize,
    pub eef_pos: Vec3,
    pub gripper_open: bool,
    pub held: Option<String>,
    pub objects: BTreeMap<String, Vec3>,
    pub target: Vec3,
}

fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn horizontal_dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn env_reset(spec: &TaskSpec, cfg: &SimConfig, seed: u64) -> (EnvState, Observation) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = Vec::new();
    match spec.kind {
        TaskKind::Reach => {
            objects.push(SimObject { name: TARGET.into(), pos: spec.goal.sample(&mut rng), graspable: false });
        }
        TaskKind::PickPlace => {
            objects.push(SimObject { name: CUBE.into(), pos: spec.cube.sample(&mut rng), graspable: true });
            objects.push(SimObject { name: TARGET.into(), pos: spec.goal.sample(&mut rng), graspable: false });
        }
        TaskKind::StackTwo => {
            objects.push(SimObject { name: CUBE.into(), pos: spec.cube.sample(&mut rng), graspable: true });
            objects.push(SimObject { name: BASE.into(), pos: spec.goal.sample(&mut rng), graspable: false });
        }
    }
    let state = EnvState { task: spec.kind, gripper_pos: cfg.home, gripper_open: true, held: None, objects, step: 0 };
    let obs = state.observation(cfg);
    (state, obs)
}

fn release(state: &mut EnvState, cfg: &SimConfig) {
    if let Some(i) = state.held.take() {
        let pos = state.objects[i].pos;
        let mut rest = cfg.table_z();
        for (j, o) in state.objects.iter().enumerate() {
            if j != i && o.name == BASE && horizontal_dist(&o.pos, &pos) < cfg.cube_size / 2.0 {
                rest = rest.max(o.pos[2] + cfg.cube_size);
            }
        }
        state.objects[i].pos[2] = rest.min(pos[2]);
    }
}

/// Advances the world by one action. Returns the new observation and
/// whether the task predicate holds afterwards.
pub fn env_step(
    state: &mut EnvState,
    action: &Action,
    spec: &TaskSpec,
    cfg: &SimConfig,
    faults: &FaultConfig,
    rng: &mut impl Rng,
) -> (Observation, bool) {
    match action.gripper_cmd {
        GripperCmd::Close if state.gripper_open => {
            state.gripper_open = false;
            let pos = state.gripper_pos;
            let nearest = state
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.graspable)
                .map(|(i, o)| (i, dist(&o.pos, &pos)))
                .filter(|&(_, d)| d <= cfg.grasp_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            state.held = nearest.map(|(i, _)| i);
        }
        GripperCmd::Open if !state.gripper_open => {
            release(state, cfg);
            state.gripper_open = true;
        }
        _ => {}
    }

    let mut next = state.gripper_pos;
    for i in 0..3 {
        let mut d = action.delta_pos[i].clamp(-1.0, 1.0) * cfg.max_step_m;
        if faults.action_noise > 0.0 {
            let n: f64 = StandardNormal.sample(rng);
            d += n.clamp(-4.0, 4.0) * faults.action_noise;
        }
        next[i] += d;
    }
    state.gripper_pos = cfg.workspace.clamp(next);

    if state.held.is_some() && faults.slip_prob > 0.0 && rng.random::<f64>() < faults.slip_prob {
        release(state, cfg);
    }
    if let Some(i) = state.held {
        state.objects[i].pos = state.gripper_pos;
    }
    state.step += 1;
    let success = state.is_success(spec, cfg);
    (state.observation(cfg), success)
}

fn toward(from: &Vec3, to: &Vec3, max_step: f64) -> Vec3 {
    let mut d = [0.0; 3];
    for i in 0..3 {
        d[i] = ((to[i] - from[i]) / max_step).clamp(-1.0, 1.0);
    }
    d
}

const SETTLE: f64 = 0.004;

/// Scripted demonstrator: approach, grasp, lift, transport, lower, release.
pub fn expert_step(state: &EnvState, cfg: &SimConfig) -> (Action, Phase) {
    let pos = state.gripper_pos;
    let target = state.target(cfg);
    let act = |dp: Vec3, cmd: GripperCmd| Action { delta_pos: dp, gripper_cmd: cmd };

    if state.task == TaskKind::Reach {
        if dist(&pos, &target) < 1e-9 {
            return (Action::hold(), Phase::Done);
        }
        return (act(toward(&pos, &target, cfg.max_step_m), GripperCmd::Hold), Phase::Approach);
    }

    let Some(ci) = state.cube_index() else {
        return (Action::hold(), Phase::Done);
    };
    if state.held == Some(ci) {
        let carry = cfg.carry_height.max(target[2]);
        if horizontal_dist(&pos, &target) > SETTLE {
            if pos[2] < carry - SETTLE {
                let aim = [pos[0], pos[1], carry];
                return (act(toward(&pos, &aim, cfg.max_step_m), GripperCmd::Hold), Phase::Lift);
            }
            let aim = [target[0], target[1], carry];
            return (act(toward(&pos, &aim, cfg.max_step_m), GripperCmd::Hold), Phase::Transport);
        }
        if pos[2] - target[2] > SETTLE {
            return (act(toward(&pos, &target, cfg.max_step_m), GripperCmd::Hold), Phase::Lower);
        }
        return (act([0.0; 3], GripperCmd::Open), Phase::Release);
    }

    let cube = state.objects[ci].pos;
    let placed = dist(&cube, &target) < 0.5 * cfg.cube_size / 2.0;
    if placed && state.gripper_open {
        return (Action::hold(), Phase::Done);
    }
    let cmd = if state.gripper_open { GripperCmd::Hold } else { GripperCmd::Open };
    if state.gripper_open && dist(&pos, &cube) <= cfg.grasp_radius / 2.0 {
        return (act([0.0; 3], GripperCmd::Close), Phase::Grasp);
    }
    (act(toward(&pos, &cube, cfg.max_step_m), cmd), Phase::Approach)
}

/// Runs the demonstrator noise-free for up to `n` steps on a copy of `state`,
/// stopping early when the task succeeds.
pub fn expert_window(state: &EnvState, spec: &TaskSpec, cfg: &SimConfig, n: usize) -> Vec<Action> {
    let mut s = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(n);
    if s.is_success(spec, cfg) {
        return out;
    }
    for _ in 0..n {
        let (a, _) = expert_step(&s, cfg);
        out.push(a);
        let (_, done) = env_step(&mut s, &a, spec, cfg, &FaultConfig::default(), &mut rng);
        if done {
            break;
        }
    }
    out
}

fn current_gripper(state: &EnvState) -> GripperState {
    if state.gripper_open {
        GripperState::Open
    } else {
        GripperState::Closed
    }
}

fn subgoal_text(phase: Phase) -> &'static str {
    match phase {
        Phase::Approach => "move gripper toward the cube",
        Phase::Grasp => "close the gripper on the cube",
        Phase::Lift => "lift the cube",
        Phase::Transport => "carry the cube above the target",
        Phase::Lower => "lower the cube onto the target",
        Phase::Release => "release the cube",
        Phase::Done => "hold position",
    }
}

/// Everything the scripted oracles need to plan from an observation.
#[derive(Debug, Clone)]
pub struct OracleContext {
    pub spec: TaskSpec,
    pub sim: SimConfig,
    pub annotation: AnnotationConfig,
    pub vocab: Arc<Vocabulary>,
}

impl OracleContext {
    pub fn new(spec: TaskSpec, sim: SimConfig, annotation: AnnotationConfig, vocab: Arc<Vocabulary>) -> Self {
        OracleContext { spec, sim, annotation, vocab }
    }

    fn state_of(&self, window: &[Observation]) -> EnvState {
        let obs = window.last().expect("observation window is never empty");
        EnvState::from_observation(obs, self.spec.kind)
    }

    /// Instruction an annotator would assign to the demonstrator's next period.
    pub fn oracle_instruction(&self, obs: &Observation) -> InstructionId {
        let state = EnvState::from_observation(obs, self.spec.kind);
        self.instruction_for_state(&state)
    }

    pub fn instruction_for_state(&self, state: &EnvState) -> InstructionId {
        let window = expert_window(state, &self.spec, &self.sim, self.sim.chunk);
        if window.is_empty() {
            return self.vocab.adjust_id().unwrap_or(InstructionId(0));
        }
        let refs: Vec<&Action> = window.iter().collect();
        match label_actions(&refs, 0, current_gripper(state), &self.annotation, &self.vocab) {
            Ok((_, id)) => id,
            Err(_) => self.vocab.adjust_id().unwrap_or(InstructionId(0)),
        }
    }

    /// Nominal gripper displacement (meters) and final gripper state of one
    /// period executed under `id`.
    fn nominal_effect(&self, id: InstructionId, state: &EnvState) -> (Vec3, Option<GripperState>) {
        let span = self.sim.chunk as f64 * self.sim.max_step_m;
        let mut d = [0.0; 3];
        let form = self.vocab.form(id);
        for dir in form.directions() {
            if let Some(c) = self.annotation.component(dir.axis) {
                d[c] = dir.sign.as_f64() * span;
            }
        }
        let grip = match form {
            MotionForm::Adjust => Some(current_gripper(state)),
            _ => form.gripper(),
        };
        (d, grip)
    }
}

/// Scripted motion predictor that always returns the demonstrator's
/// instruction.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    ctx: Arc<OracleContext>,
}

pub fn oracle_predictor(ctx: Arc<OracleContext>) -> OraclePredictor {
    OraclePredictor { ctx }
}

impl MotionPredictor for OraclePredictor {
    fn predict(&mut self, window: &[Observation], _task: &str) -> Result<InstructionId, ControlError> {
        Ok(self.ctx.instruction_for_state(&self.ctx.state_of(window)))
    }
}

/// Wraps a predictor and, with probability `p`, replaces its output by a
/// uniformly drawn different instruction.
pub struct FaultyPredictor<P> {
    base: P,
    p: f64,
    vocab_len: usize,
    rng: ChaCha8Rng,
    pub corrupted: u64,
    pub calls: u64,
}

pub fn faulty_predictor<P: MotionPredictor>(base: P, p: f64, vocab_len: usize, seed: u64) -> FaultyPredictor<P> {
    assert!((0.0..=1.0).contains(&p), "corruption probability {p} not in [0, 1]");
    FaultyPredictor { base, p, vocab_len, rng: ChaCha8Rng::seed_from_u64(seed), corrupted: 0, calls: 0 }
}

impl<P: MotionPredictor> MotionPredictor for FaultyPredictor<P> {
    fn predict(&mut self, window: &[Observation], task: &str) -> Result<InstructionId, ControlError> {
        let id = self.base.predict(window, task)?;
        self.calls += 1;
        if self.vocab_len > 1 && self.rng.random::<f64>() < self.p {
            self.corrupted += 1;
            let mut other = self.rng.random_range(0..self.vocab_len - 1);
            if other >= id.0 {
                other += 1;
            }
            return Ok(InstructionId(other));
        }
        Ok(id)
    }
}

/// Scripted corrector: flags a proposal whose nominal effect deviates from
/// the demonstrator's by more than `fail_dist` meters or disagrees on the
/// gripper, and corrects to the demonstrator's instruction.
#[derive(Debug, Clone)]
pub struct OracleCorrector {
    ctx: Arc<OracleContext>,
    pub fail_dist: f64,
}

pub fn oracle_corrector(ctx: Arc<OracleContext>, fail_dist: f64) -> OracleCorrector {
    assert!(fail_dist > 0.0);
    OracleCorrector { ctx, fail_dist }
}

impl MotionCorrector for OracleCorrector {
    fn assess(&mut self, window: &[Observation], proposed: InstructionId) -> Result<Assessment, ControlError> {
        let state = self.ctx.state_of(window);
        let oracle = self.ctx.instruction_for_state(&state);
        if proposed == oracle {
            return Ok(Assessment::ok());
        }
        let (dp, gp) = self.ctx.nominal_effect(proposed, &state);
        let (d_o, g_o) = self.ctx.nominal_effect(oracle, &state);
        let deviation = dist(&dp, &d_o);
        let adjust_mismatch = matches!(self.ctx.vocab.form(proposed), MotionForm::Adjust)
            != matches!(self.ctx.vocab.form(oracle), MotionForm::Adjust);
        if deviation > self.fail_dist || gp != g_o || adjust_mismatch {
            let (_, phase) = expert_step(&state, &self.ctx.sim);
            let text = if self.ctx.spec.kind == TaskKind::Reach {
                "move gripper toward the target"
            } else {
                subgoal_text(phase)
            };
            return Ok(Assessment { failure: true, semantic: text.to_string() });
        }
        Ok(Assessment::ok())
    }

    fn correct(&mut self, window: &[Observation], _semantic: &str) -> Result<InstructionId, ControlError> {
        Ok(self.ctx.instruction_for_state(&self.ctx.state_of(window)))
    }
}

/// Scripted stand-in for a well-trained motion-conditioned policy. Where the
/// instruction agrees with the demonstrator it reproduces the demonstrator's
/// actions; along instructed directions the demonstrator does not take it
/// moves at full speed, and it suppresses strong motion the instruction does
/// not ask for.
#[derive(Debug, Clone)]
pub struct InstructionFollower {
    ctx: Arc<OracleContext>,
}

pub fn instruction_follower(ctx: Arc<OracleContext>) -> InstructionFollower {
    InstructionFollower { ctx }
}

impl InstructionFollower {
    pub fn chunk_for_state(&self, state: &EnvState, instr: InstructionId) -> Vec<Action> {
        let ctx = &self.ctx;
        let n = ctx.sim.chunk;
        let tau = ctx.annotation.threshold;
        let reference = expert_window(state, &ctx.spec, &ctx.sim, n);
        let mut mean = [0.0; 3];
        for a in &reference {
            for i in 0..3 {
                mean[i] += a.delta_pos[i] / reference.len().max(1) as f64;
            }
        }
        let ref_grip = reference.iter().fold(current_gripper(state), |g, a| match a.gripper_cmd {
            GripperCmd::Open => GripperState::Open,
            GripperCmd::Close => GripperState::Closed,
            GripperCmd::Hold => g,
        });

        let form = ctx.vocab.form(instr).clone();
        let mut instructed: [Option<Sign>; 3] = [None; 3];
        for d in form.directions() {
            if let Some(c) = ctx.annotation.component(d.axis) {
                instructed[c] = Some(d.sign);
            }
        }
        let agrees = (0..3).all(|c| match instructed[c] {
            Some(s) => mean[c] * s.as_f64() > tau,
            None => true,
        });
        let wanted_grip = match &form {
            MotionForm::Adjust => None,
            f => f.gripper(),
        };

        let mut sim_state = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(n);
        for step in 0..n {
            let (e, _) = expert_step(&sim_state, &ctx.sim);
            let mut a = e;
            if !matches!(form, MotionForm::Adjust) {
                for c in 0..3 {
                    a.delta_pos[c] = match instructed[c] {
                        Some(s) if mean[c] * s.as_f64() > tau => e.delta_pos[c],
                        Some(s) => s.as_f64(),
                        None if mean[c].abs() > tau && !agrees => 0.0,
                        None => e.delta_pos[c],
                    };
                }
                if matches!(form, MotionForm::SetGripper { .. }) {
                    a.delta_pos = [0.0; 3];
                }
            }
            a.gripper_cmd = match wanted_grip {
                None => e.gripper_cmd,
                Some(g) if g == ref_grip => e.gripper_cmd,
                Some(g) if step == 0 => match g {
                    GripperState::Open => GripperCmd::Open,
                    GripperState::Closed => GripperCmd::Close,
                },
                Some(_) => GripperCmd::Hold,
            };
            out.push(a);
            env_step(&mut sim_state, &a, &ctx.spec, &ctx.sim, &FaultConfig::default(), &mut rng);
        }
        out
    }
}

impl ChunkPolicy for InstructionFollower {
    fn act(
        &mut self,
        window: &[Observation],
        _task: &str,
        instr: InstructionId,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, ControlError> {
        let state = self.ctx.state_of(window);
        Ok(self.chunk_for_state(&state, instr))
    }
}

/// Settings for recording policy training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub count: usize,
    pub seed: u64,
    pub perturb_prob: f64,
    /// Displacement noise std-dev in meters while recording.
    pub action_noise: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig { count: 300, seed: 1, perturb_prob: 0.15, action_noise: 0.002 }
    }
}

impl DemoConfig {
    pub fn collect(&self, ctx: Arc<OracleContext>) -> Vec<Trajectory> {
        let faults = FaultConfig { action_noise: self.action_noise, ..FaultConfig::default() };
        collect_demos(ctx, self.count, self.seed, self.perturb_prob, &faults)
    }
}

/// Records demonstrations. With `perturb_prob > 0`, each period is, with that
/// probability, executed under a random instruction through the follower, so
/// the data also covers off-nominal motions and recoveries.
pub fn collect_demos(
    ctx: Arc<OracleContext>,
    count: usize,
    seed: u64,
    perturb_prob: f64,
    faults: &FaultConfig,
) -> Vec<Trajectory> {
    let follower = instruction_follower(ctx.clone());
    (0..count)
        .map(|i| {
            let ep_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let (mut state, mut obs) = env_reset(&ctx.spec, &ctx.sim, ep_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(ep_seed.wrapping_add(1));
            let mut steps = Vec::new();
            let mut success = false;
            'episode: for _ in 0..ctx.spec.max_periods * 2 {
                let chunk = if perturb_prob > 0.0 && rng.random::<f64>() < perturb_prob {
                    let id = InstructionId(rng.random_range(0..ctx.vocab.len()));
                    follower.chunk_for_state(&state, id)
                } else {
                    expert_window(&state, &ctx.spec, &ctx.sim, ctx.sim.chunk)
                };
                if chunk.is_empty() {
                    break;
                }
                for a in chunk {
                    let prev = obs.clone();
                    let (o, done) = env_step(&mut state, &a, &ctx.spec, &ctx.sim, faults, &mut rng);
                    steps.push(Step { obs: prev, act: a });
                    obs = o;
                    if done {
                        success = true;
                        break 'episode;
                    }
                }
            }
            Trajectory {
                id: format!("{}-{seed}-{i:05}", ctx.spec.name()),
                task: ctx.spec.name().to_string(),
                source: Source::Expert,
                success: Some(success),
                max_step_m: ctx.sim.max_step_m,
                steps,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{build_vocabulary, VocabMode};

    fn ctx(spec: TaskSpec) -> Arc<OracleContext> {
        let annotation = AnnotationConfig::default();
        let vocab = Arc::new(build_vocabulary(&annotation, VocabMode::Combined).unwrap());
        Arc::new(OracleContext::new(spec, SimConfig::default(), annotation, vocab))
    }

    #[test]
    fn reset_is_seeded() {
        let spec = TaskSpec::pick_place();
        let cfg = SimConfig::default();
        assert_eq!(env_reset(&spec, &cfg, 3), env_reset(&spec, &cfg, 3));
        assert_ne!(env_reset(&spec, &cfg, 3).0, env_reset(&spec, &cfg, 4).0);
    }

    #[test]
    fn point_distribution_places_cube_exactly() {
        let spec = TaskSpec::pick_place().with_cube_region(Region::Point([-0.1, 0.05, 0.02]));
        let (state, obs) = env_reset(&spec, &SimConfig::default(), 11);
        assert_eq!(state.objects[0].pos, [-0.1, 0.05, 0.02]);
        assert_eq!(obs.object_poses[CUBE], [-0.1, 0.05, 0.02]);
    }

    #[test]
    fn disrupted_cube_lands_inside_rectangle() {
        let rect = Region::Box { min: [-0.15, 0.0, 0.02], max: [-0.05, 0.1, 0.02] };
        let spec = TaskSpec::pick_place().with_cube_region(rect);
        for seed in 0..200 {
            let (state, _) = env_reset(&spec, &SimConfig::default(), seed);
            assert!(rect.contains(&state.objects[0].pos));
        }
    }

    #[test]
    fn zero_action_only_advances_step_counter() {
        let spec = TaskSpec::pick_place();
        let cfg = SimConfig::default();
        let (mut state, _) = env_reset(&spec, &cfg, 0);
        let before = state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env_step(&mut state, &Action::hold(), &spec, &cfg, &FaultConfig::default(), &mut rng);
        assert_eq!(state.step, 1);
        state.step = 0;
        assert_eq!(state, before);
    }

    #[test]
    fn unit_action_moves_two_centimeters() {
        let spec = TaskSpec::reach();
        let cfg = SimConfig::default();
        let (mut state, _) = env_reset(&spec, &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Action { delta_pos: [1.0, 0.0, 0.0], gripper_cmd: GripperCmd::Hold };
        env_step(&mut state, &a, &spec, &cfg, &FaultConfig::default(), &mut rng);
        assert!((state.gripper_pos[0] - 0.02).abs() < 1e-12);
    }

    #[test]
    fn straight_line_reach_takes_ceil_distance_over_step() {
        let cfg = SimConfig::default();
        for (seed, goal) in [(0, [0.1, 0.0, 0.15]), (1, [0.0, -0.07, 0.15]), (2, [0.0, 0.0, 0.05])] {
            let spec = TaskSpec { goal: Region::Point(goal), ..TaskSpec::reach() };
            let (mut state, _) = env_reset(&spec, &cfg, seed);
            let d = dist(&cfg.home, &goal);
            let expected = (d / cfg.max_step_m - 1e-9).ceil() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut steps = 0;
            loop {
                let (a, _) = expert_step(&state, &cfg);
                steps += 1;
                let (_, done) = env_step(&mut state, &a, &spec, &cfg, &FaultConfig::default(), &mut rng);
                if done || steps > 100 {
                    break;
                }
            }
            // success tolerance is 1 cm, so the final partial step may be skipped
            let lower = ((d - spec.success_tol) / cfg.max_step_m).ceil() as usize;
            assert!(steps <= expected && steps >= lower, "steps {steps} not in [{lower}, {expected}]");
        }
    }

    #[test]
    fn held_cube_tracks_gripper_and_steps_are_bounded() {
        let spec = TaskSpec::pick_place();
        let cfg = SimConfig::default();
        let faults = FaultConfig { action_noise: 0.002, slip_prob: 0.02, predictor_corruption: 0.0 };
        for seed in 0..20 {
            let (mut state, _) = env_reset(&spec, &cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..80 {
                let (a, _) = expert_step(&state, &cfg);
                let before = state.gripper_pos;
                env_step(&mut state, &a, &spec, &cfg, &faults, &mut rng);
                for i in 0..3 {
                    assert!(
                        (state.gripper_pos[i] - before[i]).abs() <= cfg.max_step_m + 4.0 * faults.action_noise + 1e-12
                    );
                }
                if let Some(h) = state.held {
                    assert_eq!(state.objects[h].pos, state.gripper_pos);
                }
            }
        }
    }

    #[test]
    fn slip_frequency_matches_configuration() {
        let spec = TaskSpec::pick_place();
        let cfg = SimConfig::default();
        let faults = FaultConfig { slip_prob: 0.1, ..Default::default() };
        let (mut state, _) = env_reset(&spec, &cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut held_steps, mut slips) = (0u32, 0u32);
        for _ in 0..20_000 {
            // re-grasp instantly to keep sampling slips
            state.gripper_open = false;
            state.held = state.cube_index();
            env_step(&mut state, &Action::hold(), &spec, &cfg, &faults, &mut rng);
            held_steps += 1;
            if state.held.is_none() {
                slips += 1;
            }
        }
        let rate = f64::from(slips) / f64::from(held_steps);
        assert!((rate - 0.1).abs() < 0.01, "slip rate {rate}");
    }

    #[test]
    fn expert_completes_every_task() {
        for spec in [TaskSpec::reach(), TaskSpec::pick_place(), TaskSpec::stack_two()] {
            let c = ctx(spec.clone());
            let demos = collect_demos(c, 30, 9, 0.0, &FaultConfig::default());
            for d in &demos {
                assert_eq!(d.success, Some(true), "{} failed", d.id);
                assert!(d.steps.len() <= spec.max_periods * c_chunk());
            }
        }
    }

    fn c_chunk() -> usize {
        SimConfig::default().chunk
    }

    #[test]
    fn oracle_says_upward_when_target_is_above() {
        let c = ctx(TaskSpec::pick_place());
        let cfg = SimConfig::default();
        let state = EnvState {
            task: TaskKind::PickPlace,
            gripper_pos: [0.0, 0.0, 0.02],
            gripper_open: true,
            held: None,
            objects: vec![
                SimObject { name: CUBE.into(), pos: [0.0, 0.0, 0.12], graspable: true },
                SimObject { name: TARGET.into(), pos: [0.1, 0.0, 0.02], graspable: false },
            ],
            step: 0,
        };
        let id = oracle_predictor(c.clone()).predict(&[state.observation(&cfg)], "pick_place").unwrap();
        assert_eq!(c.vocab.text(id), "move arm upward with gripper open");
    }

    #[test]
    fn oracle_closes_the_gripper_at_the_cube() {
        let c = ctx(TaskSpec::pick_place());
        let cfg = SimConfig::default();
        let (mut state, _) = env_reset(&TaskSpec::pick_place(), &cfg, 1);
        state.gripper_pos = state.objects[0].pos;
        let id = oracle_predictor(c.clone()).predict(&[state.observation(&cfg)], "pick_place").unwrap();
        assert_eq!(c.vocab.form(id).gripper(), Some(GripperState::Closed), "{}", c.vocab.text(id));
    }

    #[test]
    fn faulty_predictor_extremes_and_rate() {
        let c = ctx(TaskSpec::pick_place());
        let cfg = SimConfig::default();
        let (_, obs) = env_reset(&TaskSpec::pick_place(), &cfg, 2);
        let w = [obs];
        let base = oracle_predictor(c.clone()).predict(&w, "pick_place").unwrap();
        let mut p0 = faulty_predictor(oracle_predictor(c.clone()), 0.0, c.vocab.len(), 1);
        let mut p1 = faulty_predictor(oracle_predictor(c.clone()), 1.0, c.vocab.len(), 1);
        for _ in 0..200 {
            assert_eq!(p0.predict(&w, "pick_place").unwrap(), base);
            let other = p1.predict(&w, "pick_place").unwrap();
            assert_ne!(other, base);
            assert!(c.vocab.contains(other));
        }
        let mut p = faulty_predictor(oracle_predictor(c.clone()), 0.3, c.vocab.len(), 7);
        let wrong = (0..10_000).filter(|_| p.predict(&w, "pick_place").unwrap() != base).count();
        assert!((wrong as f64 / 10_000.0 - 0.3).abs() < 0.02);
    }

    #[test]
    fn corrector_accepts_oracle_and_flags_opposite_motion() {
        let c = ctx(TaskSpec::pick_place());
        let cfg = SimConfig::default();
        let (_, obs) = env_reset(&TaskSpec::pick_place(), &cfg, 3);
        let w = [obs];
        let oracle = oracle_predictor(c.clone()).predict(&w, "pick_place").unwrap();
        let mut mcm = oracle_corrector(c.clone(), 0.05);
        assert_eq!(mcm.assess(&w, oracle).unwrap(), Assessment::ok());
        let away = c.vocab.find_text("move arm upward with gripper open").unwrap();
        let verdict = mcm.assess(&w, away).unwrap();
        assert!(verdict.failure);
        assert_eq!(verdict.semantic, "move gripper toward the cube");
        assert_eq!(mcm.correct(&w, &verdict.semantic).unwrap(), oracle);
    }

    #[test]
    fn follower_reproduces_the_expert_under_oracle_instructions() {
        let c = ctx(TaskSpec::pick_place());
        let follower = instruction_follower(c.clone());
        let cfg = SimConfig::default();
        for seed in 0..500u64 {
            let (mut state, _) = env_reset(&c.spec, &cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ok = false;
            'ep: for _ in 0..c.spec.max_periods {
                let id = c.instruction_for_state(&state);
                for a in follower.chunk_for_state(&state, id) {
                    if env_step(&mut state, &a, &c.spec, &cfg, &FaultConfig::default(), &mut rng).1 {
                        ok = true;
                        break 'ep;
                    }
                }
            }
            assert!(ok, "seed {seed} failed");
        }
    }
}
