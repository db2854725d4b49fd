#![allow(dead_code)]

use motionloop_core::annotate::{build_vocabulary, AnnotationConfig, InstructionId, VocabMode};
use motionloop_core::policy::{
    loss_and_grads, MotionConditioning, NoiseSchedule, NoisedItem, PolicyDims, PolicyModel, TrainExample, ACTION_DIM,
    OBS_FEATURES,
};
use motionloop_core::trajdata::{Action, GripperCmd, Observation, Source, Step, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Kind of synthetic window, chosen to cover every branch of the labeller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum WindowKind {
    Quiet,
    Single,
    Pair,
    Triple,
    Random,
}

fn synth_window(rng: &mut ChaCha8Rng, kind: WindowKind, len: usize) -> Vec<Action> {
    let mut base = [0.0f64; 3];
    let strong = |rng: &mut ChaCha8Rng| {
        let m: f64 = rng.random_range(0.35..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    };
    match kind {
        WindowKind::Quiet => {}
        WindowKind::Single => base[rng.random_range(0..3)] = strong(rng),
        WindowKind::Pair => {
            let skip = rng.random_range(0..3);
            for (i, b) in base.iter_mut().enumerate() {
                if i != skip {
                    *b = strong(rng);
                }
            }
        }
        WindowKind::Triple => base.iter_mut().for_each(|b| *b = strong(rng)),
        WindowKind::Random => base.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0)),
    }
    (0..len)
        .map(|_| {
            let mut dp = [0.0; 3];
            for i in 0..3 {
                dp[i] = (base[i] + rng.random_range(-0.25..0.25)).clamp(-1.0, 1.0);
            }
            let gripper_cmd = match rng.random_range(0..10) {
                0 => GripperCmd::Open,
                1 => GripperCmd::Close,
                _ => GripperCmd::Hold,
            };
            Action { delta_pos: dp, gripper_cmd }
        })
        .collect()
}

fn obs_at(i: usize) -> Observation {
    Observation {
        eef_pos: [0.0, 0.0, 0.1 + i as f64 * 1e-4],
        gripper_width: 1.0,
        object_poses: BTreeMap::new(),
        task_phase_hint: None,
    }
}

/// Trajectory of `windows` windows of `window` steps. Returns the kinds too.
pub fn synthetic_trajectory(seed: u64, windows: usize, window: usize) -> (Trajectory, Vec<WindowKind>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [WindowKind::Quiet, WindowKind::Single, WindowKind::Pair, WindowKind::Triple, WindowKind::Random];
    let mut steps = Vec::new();
    let mut used = Vec::new();
    for _ in 0..windows {
        let kind = kinds[rng.random_range(0..kinds.len())];
        used.push(kind);
        for act in synth_window(&mut rng, kind, window) {
            steps.push(Step { obs: obs_at(steps.len()), act });
        }
    }
    let traj = Trajectory {
        id: format!("synthetic-{seed}"),
        task: "synthetic".into(),
        source: Source::Expert,
        success: None,
        max_step_m: 0.02,
        steps,
    };
    (traj, used)
}

/// Declarative re-statement of the labelling rule: the instruction text is
/// the unique vocabulary entry whose direction words are exactly the top
/// (at most two) axes whose mean normalized component exceeds the
/// threshold, with the gripper word of the replayed command state.
pub fn brute_force_label(actions: &[Action], gripper_closed_before: bool, threshold: f64) -> (String, bool) {
    let n = actions.len() as f64;
    let mut mean = [0.0f64; 3];
    for a in actions {
        for i in 0..3 {
            mean[i] += a.delta_pos[i] / n;
        }
    }
    let mut closed = gripper_closed_before;
    for a in actions {
        match a.gripper_cmd {
            GripperCmd::Open => closed = false,
            GripperCmd::Close => closed = true,
            GripperCmd::Hold => {}
        }
    }
    let words = [("right", "left"), ("forward", "backward"), ("upward", "downward")];
    let over: Vec<usize> = (0..3).filter(|&i| mean[i].abs() > threshold).collect();
    if over.is_empty() {
        return ("make slight adjustments to gripper position".to_string(), closed);
    }
    let word = |i: usize| if mean[i] > 0.0 { words[i].0 } else { words[i].1 };
    let grip = if closed { "closed" } else { "open" };
    // every subset of size min(2, |over|) whose members are not beaten by an
    // excluded axis; with distinct magnitudes exactly one qualifies
    let k = over.len().min(2);
    let mut best: Option<Vec<usize>> = None;
    for mask in 1u32..8 {
        let set: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        if set.len() != k || !set.iter().all(|i| over.contains(i)) {
            continue;
        }
        let weakest = set.iter().map(|&i| mean[i].abs()).fold(f64::INFINITY, f64::min);
        let beaten = over.iter().any(|i| !set.contains(i) && mean[*i].abs() > weakest);
        if !beaten {
            assert!(best.is_none(), "ambiguous synthetic window");
            best = Some(set);
        }
    }
    let set = best.expect("one subset qualifies");
    let text = if set.len() == 1 {
        format!("move arm {} with gripper {grip}", word(set[0]))
    } else {
        format!("move arm {} and {} with gripper {grip}", word(set[0]), word(set[1]))
    };
    (text, closed)
}

/// Max relative error between analytic and central-difference gradients of
/// the noise-prediction loss, over every dense parameter and the touched
/// codebook rows of a small model. Returns (max error, parameters checked).
pub fn gradient_check(seed: u64) -> (f64, usize) {
    let cfg = AnnotationConfig::default();
    let vocab = build_vocabulary(&cfg, VocabMode::Combined).unwrap();
    let dims = PolicyDims { embed: 6, hidden: 7, time_embed: 4, history: 3, chunk: 2 };
    let mut model = PolicyModel::new(dims, MotionConditioning::learned(&vocab, 5, seed).unwrap(), seed).unwrap();
    let sched = NoiseSchedule::default_for(10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let n = dims.chunk_len();
    let examples: Vec<TrainExample> = (0..3)
        .map(|i| TrainExample {
            features: (0..dims.history * OBS_FEATURES).map(|_| rng.random_range(-1.0..1.0)).collect(),
            instr: InstructionId(i * 11 % vocab.len()),
            chunk: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let eps: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let ks = [0usize, 4, 9];
    let loss = |m: &PolicyModel| {
        let items: Vec<NoisedItem> =
            (0..3).map(|i| NoisedItem { example: &examples[i], k: ks[i], eps: &eps[i] }).collect();
        loss_and_grads(m, &sched, &items).unwrap()
    };
    let (_, grads) = loss(&model);
    let h = 1e-5;
    let rel = |a: f64, num: f64| (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let names = ["embed", "query", "key", "value", "l1", "l2", "motion_proj", "out"];
    for name in names {
        let g = grads.layer(name).unwrap().clone();
        for which in 0..2 {
            let len = if which == 0 { g.w.len() } else { g.b.len() };
            for i in 0..len {
                let orig = param(&mut model, name, which, i, None);
                param(&mut model, name, which, i, Some(orig + h));
                let lp = loss(&model).0;
                param(&mut model, name, which, i, Some(orig - h));
                let lm = loss(&model).0;
                param(&mut model, name, which, i, Some(orig));
                let a = if which == 0 { g.w[i] } else { g.b[i] };
                worst = worst.max(rel(a, (lp - lm) / (2.0 * h)));
                checked += 1;
            }
        }
    }
    let dim = model.motion.table.dim;
    for (row, g) in &grads.motion_rows {
        for j in 0..dim {
            let idx = row * dim + j;
            let orig = model.motion.table.entries[idx];
            model.motion.table.entries[idx] = orig + h;
            let lp = loss(&model).0;
            model.motion.table.entries[idx] = orig - h;
            let lm = loss(&model).0;
            model.motion.table.entries[idx] = orig;
            worst = worst.max(rel(g[j], (lp - lm) / (2.0 * h)));
            checked += 1;
        }
    }
    assert_eq!(ACTION_DIM * dims.chunk, n);
    (worst, checked)
}

fn param(model: &mut PolicyModel, name: &str, which: usize, i: usize, set: Option<f64>) -> f64 {
    let layer = match name {
        "embed" => &mut model.embed,
        "query" => &mut model.query,
        "key" => &mut model.key,
        "value" => &mut model.value,
        "l1" => &mut model.l1,
        "l2" => &mut model.l2,
        "motion_proj" => &mut model.motion_proj,
        "out" => &mut model.out,
        _ => unreachable!("unknown layer {name}"),
    };
    let slot = if which == 0 { &mut layer.w[i] } else { &mut layer.b[i] };
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}
