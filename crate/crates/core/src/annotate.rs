//! Motion-instruction vocabulary and automatic annotation of trajectories.
//!
//! A trajectory is cut into consecutive windows of `window` steps. Each
//! window's normalized deltas are averaged; axes whose mean magnitude exceeds
//! the threshold become dominant directions (at most two, largest first).
//! Directions plus the carried gripper state select one vocabulary entry;
//! windows with no dominant direction map to the slight-adjustment entry.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trajdata::{Action, GripperCmd, Step, Trajectory, Vec3};

pub const ADJUST_TEXT: &str = "make slight adjustments to gripper position";

/// Instructions of the real-robot flat vocabulary, in their canonical order.
pub const FLAT_TEXTS: [&str; 8] = [
    "move arm upward",
    "move arm downward",
    "move arm right",
    "move arm left",
    "move arm forward",
    "move arm backward",
    "open the gripper",
    "close the gripper",
];

#[derive(Debug, Error, PartialEq)]
pub enum AnnotateError {
    #[error("invalid annotation config: {0}")]
    ConfigInvalid(String),
    #[error("aggregation window is empty")]
    EmptyWindow,
    #[error("no vocabulary entry for {0}")]
    VocabularyMismatch(String),
}

/// Dense index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionId(pub usize);

impl fmt::Display for InstructionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Pos,
    #[serde(rename = "-")]
    Neg,
}

impl Sign {
    pub fn of(v: f64) -> Sign {
        if v < 0.0 {
            Sign::Neg
        } else {
            Sign::Pos
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Sign::Pos => 1.0,
            Sign::Neg => -1.0,
        }
    }

    fn suffix(self) -> char {
        match self {
            Sign::Pos => '+',
            Sign::Neg => '-',
        }
    }
}

/// A signed axis; `axis` indexes the configured axis list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction {
    pub axis: usize,
    pub sign: Sign,
}

impl Direction {
    pub fn new(axis: usize, sign: Sign) -> Self {
        Direction { axis, sign }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperState {
    Open,
    Closed,
}

impl GripperState {
    fn word(self) -> &'static str {
        match self {
            GripperState::Open => "open",
            GripperState::Closed => "closed",
        }
    }
}

/// Structured meaning of a vocabulary entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MotionForm {
    /// Directions are sorted by axis index. `gripper` is `None` in flat mode.
    Move {
        dirs: Vec<Direction>,
        gripper: Option<GripperState>,
    },
    SetGripper {
        gripper: GripperState,
    },
    Adjust,
}

impl MotionForm {
    pub fn directions(&self) -> &[Direction] {
        match self {
            MotionForm::Move { dirs, .. } => dirs,
            _ => &[],
        }
    }

    pub fn gripper(&self) -> Option<GripperState> {
        match self {
            MotionForm::Move { gripper, .. } => *gripper,
            MotionForm::SetGripper { gripper } => Some(*gripper),
            MotionForm::Adjust => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Combined,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: InstructionId,
    pub text: String,
    pub form: MotionForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub id: String,
    pub mode: VocabMode,
    pub axes: Vec<String>,
    pub entries: Vec<VocabEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    pub window: usize,
    pub threshold: f64,
    pub max_directions: usize,
    pub axes: Vec<String>,
    /// Keyed by axis name plus sign, e.g. `"x+"`.
    pub axis_words: BTreeMap<String, String>,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        let axis_words = [
            ("x+", "right"),
            ("x-", "left"),
            ("y+", "forward"),
            ("y-", "backward"),
            ("z+", "upward"),
            ("z-", "downward"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        AnnotationConfig {
            window: 4,
            threshold: 0.3,
            max_directions: 2,
            axes: vec!["x".into(), "y".into(), "z".into()],
            axis_words,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        let bad = |m: String| Err(AnnotateError::ConfigInvalid(m));
        if self.window < 1 {
            return bad("window must be >= 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} not in (0, 1)", self.threshold));
        }
        if !(1..=2).contains(&self.max_directions) {
            return bad(format!("max_directions {} not in {{1, 2}}", self.max_directions));
        }
        if self.axes.is_empty() {
            return bad("no axes configured".into());
        }
        for (i, a) in self.axes.iter().enumerate() {
            if self.axes[..i].contains(a) {
                return bad(format!("duplicate axis `{a}`"));
            }
            for s in [Sign::Pos, Sign::Neg] {
                if !self.axis_words.contains_key(&format!("{a}{}", s.suffix())) {
                    return bad(format!("axis word map has no entry for `{a}{}`", s.suffix()));
                }
            }
        }
        Ok(())
    }

    pub fn word(&self, dir: Direction) -> &str {
        let key = format!("{}{}", self.axes[dir.axis], dir.sign.suffix());
        &self.axis_words[&key]
    }

    /// Action component driving an axis, for the translational axes x, y, z.
    pub fn component(&self, axis: usize) -> Option<usize> {
        match self.axes.get(axis)?.as_str() {
            "x" => Some(0),
            "y" => Some(1),
            "z" => Some(2),
            _ => None,
        }
    }

    /// Stable fingerprint recorded in dataset manifests.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..16].to_string()
    }

    fn direction_for_word(&self, word: &str) -> Option<Direction> {
        for (axis, _) in self.axes.iter().enumerate() {
            for sign in [Sign::Pos, Sign::Neg] {
                let d = Direction::new(axis, sign);
                if self.word(d) == word {
                    return Some(d);
                }
            }
        }
        None
    }
}

/// Number of combined-mode entries for `n` axes: 2(2n + 4 C(n,2)) + 1.
pub fn combined_vocab_size(n: usize) -> usize {
    2 * (2 * n + 4 * (n * n.saturating_sub(1) / 2)) + 1
}

fn move_text(words: &[&str], gripper: Option<GripperState>) -> String {
    let mut text = format!("move arm {}", words.join(" and "));
    if let Some(g) = gripper {
        text.push_str(" with gripper ");
        text.push_str(g.word());
    }
    text
}

pub fn build_vocabulary(cfg: &AnnotationConfig, mode: VocabMode) -> Result<Vocabulary, AnnotateError> {
    cfg.validate()?;
    let mut forms: Vec<(String, MotionForm)> = Vec::new();
    match mode {
        VocabMode::Combined => {
            let grips = [GripperState::Open, GripperState::Closed];
            for axis in 0..cfg.axes.len() {
                for sign in [Sign::Pos, Sign::Neg] {
                    let d = Direction::new(axis, sign);
                    for g in grips {
                        forms.push((
                            move_text(&[cfg.word(d)], Some(g)),
                            MotionForm::Move { dirs: vec![d], gripper: Some(g) },
                        ));
                    }
                }
            }
            for a in 0..cfg.axes.len() {
                for b in a + 1..cfg.axes.len() {
                    for sa in [Sign::Pos, Sign::Neg] {
                        for sb in [Sign::Pos, Sign::Neg] {
                            let (da, db) = (Direction::new(a, sa), Direction::new(b, sb));
                            for g in grips {
                                forms.push((
                                    move_text(&[cfg.word(da), cfg.word(db)], Some(g)),
                                    MotionForm::Move { dirs: vec![da, db], gripper: Some(g) },
                                ));
                            }
                        }
                    }
                }
            }
            forms.push((ADJUST_TEXT.to_string(), MotionForm::Adjust));
        }
        VocabMode::Flat => {
            for text in FLAT_TEXTS {
                let form = match text {
                    "open the gripper" => MotionForm::SetGripper { gripper: GripperState::Open },
                    "close the gripper" => MotionForm::SetGripper { gripper: GripperState::Closed },
                    _ => {
                        let word = text.trim_start_matches("move arm ");
                        let d = cfg.direction_for_word(word).ok_or_else(|| {
                            AnnotateError::ConfigInvalid(format!("flat vocabulary needs an axis mapped to `{word}`"))
                        })?;
                        MotionForm::Move { dirs: vec![d], gripper: None }
                    }
                };
                forms.push((text.to_string(), form));
            }
        }
    }

    for (i, (t, _)) in forms.iter().enumerate() {
        if forms[..i].iter().any(|(u, _)| u == t) {
            return Err(AnnotateError::ConfigInvalid(format!("duplicate instruction text `{t}`")));
        }
    }

    let entries: Vec<VocabEntry> = forms
        .into_iter()
        .enumerate()
        .map(|(i, (text, form))| VocabEntry { id: InstructionId(i), text, form })
        .collect();
    let digest = Sha256::digest(serde_json::to_string(&entries).expect("entries serialize").as_bytes());
    let tag = match mode {
        VocabMode::Combined => "combined",
        VocabMode::Flat => "flat",
    };
    Ok(Vocabulary { id: format!("{tag}-{}", &hex::encode(digest)[..16]), mode, axes: cfg.axes.clone(), entries })
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: InstructionId) -> bool {
        id.0 < self.entries.len()
    }

    pub fn text(&self, id: InstructionId) -> &str {
        &self.entries[id.0].text
    }

    pub fn form(&self, id: InstructionId) -> &MotionForm {
        &self.entries[id.0].form
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }

    pub fn find_text(&self, text: &str) -> Option<InstructionId> {
        self.entries.iter().find(|e| e.text == text).map(|e| e.id)
    }

    pub fn find_form(&self, form: &MotionForm) -> Option<InstructionId> {
        self.entries.iter().find(|e| &e.form == form).map(|e| e.id)
    }

    pub fn adjust_id(&self) -> Option<InstructionId> {
        self.find_form(&MotionForm::Adjust)
    }

    pub fn ids(&self) -> impl Iterator<Item = InstructionId> {
        (0..self.entries.len()).map(InstructionId)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedAction {
    pub mean_delta: Vec3,
    pub gripper_state: GripperState,
    /// Half-open step range `[start, end)`.
    pub window_span: (usize, usize),
}

fn gripper_after(cmds: impl IntoIterator<Item = GripperCmd>, prev: GripperState) -> GripperState {
    cmds.into_iter().fold(prev, |state, cmd| match cmd {
        GripperCmd::Open => GripperState::Open,
        GripperCmd::Close => GripperState::Closed,
        GripperCmd::Hold => state,
    })
}

/// Averages one window of actions. `prev` is the gripper state carried over
/// from earlier windows (`Open` at trajectory start).
pub fn aggregate_actions(
    actions: &[&Action],
    start: usize,
    prev: GripperState,
    cfg: &AnnotationConfig,
) -> Result<AggregatedAction, AnnotateError> {
    if actions.is_empty() {
        return Err(AnnotateError::EmptyWindow);
    }
    if actions.len() > cfg.window {
        return Err(AnnotateError::ConfigInvalid(format!(
            "window of {} steps exceeds configured {}",
            actions.len(),
            cfg.window
        )));
    }
    let mut sum = [0.0; 3];
    for a in actions {
        for i in 0..3 {
            sum[i] += a.delta_pos[i];
        }
    }
    let n = actions.len() as f64;
    Ok(AggregatedAction {
        mean_delta: sum.map(|s| s / n),
        gripper_state: gripper_after(actions.iter().map(|a| a.gripper_cmd), prev),
        window_span: (start, start + actions.len()),
    })
}

pub fn aggregate_window(
    steps: &[Step],
    start: usize,
    prev: GripperState,
    cfg: &AnnotationConfig,
) -> Result<AggregatedAction, AnnotateError> {
    let actions: Vec<&Action> = steps.iter().map(|s| &s.act).collect();
    aggregate_actions(&actions, start, prev, cfg)
}

/// Axes whose mean magnitude strictly exceeds the threshold, largest first,
/// ties in configured axis order, truncated to `max_directions`.
pub fn dominant_directions(agg: &AggregatedAction, cfg: &AnnotationConfig) -> Vec<Direction> {
    let mut cands: Vec<(f64, Direction)> = (0..cfg.axes.len())
        .filter_map(|axis| {
            let v = agg.mean_delta[cfg.component(axis)?];
            (v.abs() > cfg.threshold).then(|| (v.abs(), Direction::new(axis, Sign::of(v))))
        })
        .collect();
    // stable sort keeps axis order among equal magnitudes
    cands.sort_by(|a, b| b.0.total_cmp(&a.0));
    cands.truncate(cfg.max_directions);
    cands.into_iter().map(|(_, d)| d).collect()
}

pub fn compose_instruction(
    dirs: &[Direction],
    gripper: GripperState,
    vocab: &Vocabulary,
) -> Result<InstructionId, AnnotateError> {
    let mut sorted = dirs.to_vec();
    sorted.sort();
    let form = match (vocab.mode, sorted.is_empty()) {
        (VocabMode::Combined, true) => MotionForm::Adjust,
        (VocabMode::Combined, false) => MotionForm::Move { dirs: sorted, gripper: Some(gripper) },
        (VocabMode::Flat, true) => MotionForm::SetGripper { gripper },
        (VocabMode::Flat, false) => MotionForm::Move { dirs: sorted, gripper: None },
    };
    vocab.find_form(&form).ok_or_else(|| AnnotateError::VocabularyMismatch(format!("{form:?}")))
}

/// Instruction describing a window of actions.
pub fn label_actions(
    actions: &[&Action],
    start: usize,
    prev: GripperState,
    cfg: &AnnotationConfig,
    vocab: &Vocabulary,
) -> Result<(AggregatedAction, InstructionId), AnnotateError> {
    let agg = aggregate_actions(actions, start, prev, cfg)?;
    let dirs = dominant_directions(&agg, cfg);
    let id = compose_instruction(&dirs, agg.gripper_state, vocab)?;
    Ok((agg, id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub span: (usize, usize),
    pub instr: InstructionId,
}

fn check_axes(cfg: &AnnotationConfig) -> Result<(), AnnotateError> {
    cfg.validate()?;
    for (i, name) in cfg.axes.iter().enumerate() {
        if cfg.component(i).is_none() {
            return Err(AnnotateError::ConfigInvalid(format!("axis `{name}` has no translational action component")));
        }
    }
    Ok(())
}

pub fn annotate_trajectory(
    traj: &Trajectory,
    cfg: &AnnotationConfig,
    vocab: &Vocabulary,
) -> Result<Vec<Annotation>, AnnotateError> {
    check_axes(cfg)?;
    let mut out = Vec::with_capacity(traj.steps.len().div_ceil(cfg.window));
    let mut gripper = GripperState::Open;
    for (w, chunk) in traj.steps.chunks(cfg.window).enumerate() {
        let agg = aggregate_window(chunk, w * cfg.window, gripper, cfg)?;
        gripper = agg.gripper_state;
        let dirs = dominant_directions(&agg, cfg);
        out.push(Annotation { span: agg.window_span, instr: compose_instruction(&dirs, agg.gripper_state, vocab)? });
    }
    Ok(out)
}

/// Gripper state implied by all commands before `step` (exclusive).
pub fn gripper_state_before(traj: &Trajectory, step: usize) -> GripperState {
    gripper_after(traj.steps[..step].iter().map(|s| s.act.gripper_cmd), GripperState::Open)
}

/// Sampling points for offline correction labelling: every `stride` steps.
pub fn offline_annotate(trajs: &[Trajectory], stride: usize) -> Vec<(String, usize)> {
    let stride = stride.max(1);
    trajs.iter().flat_map(|t| (0..t.steps.len()).step_by(stride).map(move |i| (t.id.clone(), i))).collect()
}

/// One line of the annotation JSONL output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub traj: String,
    pub span: (usize, usize),
    pub instr: InstructionId,
    pub text: String,
}
