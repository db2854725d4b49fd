//! Trajectory data model and JSONL persistence.
//!
//! One trajectory per line. Numbers are written in their shortest decimal
//! form that parses back to the identical `f64`, and keys always appear in
//! declaration order, so saving the same dataset twice yields the same bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Position or displacement in the workspace frame, meters unless noted.
pub type Vec3 = [f64; 3];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("trajectory `{id}`: invariant violated on {field}: {reason}")]
    InvariantViolation { id: String, field: String, reason: String },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::IoFailure { path: path.display().to_string(), source }
    }
}

/// Axis-aligned box the end effector must stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for Workspace {
    /// 40 x 40 x 30 cm box centered over the table origin.
    fn default() -> Self {
        Workspace { min: [-0.2, -0.2, 0.0], max: [0.2, 0.2, 0.3] }
    }
}

impl Workspace {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        let mut out = p;
        for i in 0..3 {
            out[i] = p[i].clamp(self.min[i], self.max[i]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub eef_pos: Vec3,
    /// 1.0 is fully open.
    pub gripper_width: f64,
    #[serde(rename = "objects")]
    pub object_poses: BTreeMap<String, Vec3>,
    /// Simulator-side phase metadata. Scripted oracles may read it; learned
    /// components never do.
    #[serde(rename = "phase", default, skip_serializing_if = "Option::is_none")]
    pub task_phase_hint: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperCmd {
    Open,
    Close,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Normalized displacement; 1.0 maps to the dataset's `max_step_m`.
    #[serde(rename = "dp")]
    pub delta_pos: Vec3,
    #[serde(rename = "grip")]
    pub gripper_cmd: GripperCmd,
}

impl Action {
    pub fn hold() -> Self {
        Action { delta_pos: [0.0; 3], gripper_cmd: GripperCmd::Hold }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Expert,
    Rollout,
    Refined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub obs: Observation,
    pub act: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub task: String,
    pub source: Source,
    pub success: Option<bool>,
    pub max_step_m: f64,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub expert: usize,
    pub rollout: usize,
    pub refined: usize,
}

impl SourceCounts {
    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut counts = SourceCounts::default();
        for t in trajs {
            match t.source {
                Source::Expert => counts.expert += 1,
                Source::Rollout => counts.rollout += 1,
                Source::Refined => counts.refined += 1,
            }
        }
        counts
    }

    pub fn total(&self) -> usize {
        self.expert + self.rollout + self.refined
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub counts: SourceCounts,
    pub vocab: String,
    pub annotation_cfg_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_step_m: Option<f64>,
    #[serde(default)]
    pub created_by: String,
}

impl DatasetManifest {
    pub fn for_trajectories(trajs: &[Trajectory]) -> Self {
        DatasetManifest {
            counts: SourceCounts::from_trajectories(trajs),
            vocab: String::new(),
            annotation_cfg_hash: String::new(),
            max_step_m: trajs.first().map(|t| t.max_step_m),
            created_by: concat!("motionloop ", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }

    pub fn with_annotation(mut self, vocab_id: &str, cfg_hash: &str) -> Self {
        self.vocab = vocab_id.to_string();
        self.annotation_cfg_hash = cfg_hash.to_string();
        self
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }
}

/// One invariant failure found by [`validate_trajectory`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub step: Option<usize>,
    pub field: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.step {
            Some(i) => write!(f, "step {i}: {}: {}", self.field, self.reason),
            None => write!(f, "{}: {}", self.field, self.reason),
        }
    }
}

pub type ValidationReport = Vec<Violation>;

/// Checks every trajectory invariant against the default workspace.
pub fn validate_trajectory(traj: &Trajectory) -> ValidationReport {
    validate_in_workspace(traj, &Workspace::default())
}

pub fn validate_in_workspace(traj: &Trajectory, ws: &Workspace) -> ValidationReport {
    let mut report = Vec::new();
    let mut push = |step: Option<usize>, field: &str, reason: String| {
        report.push(Violation { step, field: field.to_string(), reason })
    };

    if traj.id.is_empty() {
        push(None, "id", "empty id".into());
    }
    if traj.steps.is_empty() {
        push(None, "steps", "trajectory has no steps".into());
    }
    if !(traj.max_step_m.is_finite() && traj.max_step_m > 0.0) {
        push(None, "max_step_m", format!("must be positive, got {}", traj.max_step_m));
    }

    for (i, step) in traj.steps.iter().enumerate() {
        let obs = &step.obs;
        if obs.eef_pos.iter().any(|v| !v.is_finite()) {
            push(Some(i), "eef_pos", "non-finite component".into());
        } else if !ws.contains(&obs.eef_pos) {
            push(Some(i), "eef_pos", format!("{:?} outside workspace", obs.eef_pos));
        }
        if !obs.gripper_width.is_finite() || !(0.0..=1.0).contains(&obs.gripper_width) {
            push(Some(i), "gripper_width", format!("{} not in [0, 1]", obs.gripper_width));
        }
        for (name, pose) in &obs.object_poses {
            if pose.iter().any(|v| !v.is_finite()) {
                push(Some(i), "objects", format!("`{name}` has a non-finite component"));
            }
        }
        for (axis, v) in step.act.delta_pos.iter().enumerate() {
            if !v.is_finite() {
                push(Some(i), "delta_pos", format!("component {axis} non-finite"));
            } else if v.abs() > 1.0 {
                push(Some(i), "delta_pos", format!("component {axis} = {v} exceeds 1"));
            }
        }
    }
    report
}

fn check(traj: &Trajectory) -> Result<(), DataError> {
    match validate_trajectory(traj).into_iter().next() {
        None => Ok(()),
        Some(v) => {
            Err(DataError::InvariantViolation { id: traj.id.clone(), field: v.field.clone(), reason: v.to_string() })
        }
    }
}

pub fn to_jsonl_line(traj: &Trajectory) -> String {
    serde_json::to_string(traj).expect("trajectory serializes")
}

/// Parses trajectories from JSONL text, validating each one.
pub fn parse_trajectories(reader: impl BufRead) -> Result<Vec<Trajectory>, DataError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::MalformedRecord { line: line_no, reason: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line)
            .map_err(|e| DataError::MalformedRecord { line: line_no, reason: e.to_string() })?;
        check(&traj)?;
        if !seen.insert(traj.id.clone()) {
            return Err(DataError::InvariantViolation {
                id: traj.id,
                field: "id".into(),
                reason: "duplicate id in dataset".into(),
            });
        }
        out.push(traj);
    }
    Ok(out)
}

pub fn load_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    parse_trajectories(BufReader::new(file))
}

pub fn save_trajectories(trajs: &[Trajectory], path: impl AsRef<Path>) -> Result<DatasetManifest, DataError> {
    let path = path.as_ref();
    for t in trajs {
        check(t)?;
    }
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        writeln!(w, "{}", to_jsonl_line(t)).map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))?;
    Ok(DatasetManifest::for_trajectories(trajs))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_traj(id: &str, n: usize) -> Trajectory {
        let steps = (0..n)
            .map(|i| {
                let mut objects = BTreeMap::new();
                objects.insert("cube".to_string(), [0.05, -0.03, 0.02]);
                Step {
                    obs: Observation {
                        eef_pos: [0.01 * i as f64, 0.0, 0.2],
                        gripper_width: 1.0,
                        object_poses: objects,
                        task_phase_hint: None,
                    },
                    act: Action { delta_pos: [0.5, -0.1, 0.0], gripper_cmd: GripperCmd::Hold },
                }
            })
            .collect();
        Trajectory {
            id: id.to_string(),
            task: "pick_place".into(),
            source: Source::Expert,
            success: Some(true),
            max_step_m: 0.02,
            steps,
        }
    }

    #[test]
    fn valid_trajectory_has_empty_report() {
        assert!(validate_trajectory(&sample_traj("a", 10)).is_empty());
    }

    #[test]
    fn oversized_delta_reports_its_step() {
        let mut t = sample_traj("a", 10);
        t.steps[7].act.delta_pos[0] = 1.5;
        let report = validate_trajectory(&t);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].step, Some(7));
        assert_eq!(report[0].field, "delta_pos");
    }

    #[test]
    fn nan_position_is_reported_as_non_finite() {
        let mut t = sample_traj("a", 3);
        t.steps[1].obs.eef_pos[2] = f64::NAN;
        let report = validate_trajectory(&t);
        assert_eq!(report.len(), 1);
        assert!(report[0].reason.contains("non-finite"));
    }

    #[test]
    fn empty_trajectory_is_invalid() {
        let t = sample_traj("a", 0);
        assert!(!validate_trajectory(&t).is_empty());
    }

    #[test]
    fn gripper_width_out_of_range_is_rejected_on_load() {
        let mut t = sample_traj("bad", 2);
        t.steps[1].obs.gripper_width = 1.3;
        let line = serde_json::to_string(&t).unwrap();
        let err = parse_trajectories(line.as_bytes()).unwrap_err();
        match err {
            DataError::InvariantViolation { id, field, .. } => {
                assert_eq!(id, "bad");
                assert_eq!(field, "gripper_width");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{}\n{{not json\n", to_jsonl_line(&sample_traj("a", 1)));
        match parse_trajectories(text.as_bytes()).unwrap_err() {
            DataError::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let line = to_jsonl_line(&sample_traj("dup", 1));
        let text = format!("{line}\n{line}\n");
        assert!(matches!(parse_trajectories(text.as_bytes()), Err(DataError::InvariantViolation { .. })));
    }

    #[test]
    fn line_layout_follows_published_key_order() {
        let line = to_jsonl_line(&sample_traj("a", 1));
        let keys = ["\"id\"", "\"task\"", "\"source\"", "\"success\"", "\"max_step_m\"", "\"steps\""];
        let positions: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(line.contains(r#""act":{"dp":[0.5,-0.1,0.0],"grip":"hold"}"#));
    }
}
