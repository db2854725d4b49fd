mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use motionloop_core::annotate::{
    annotate_trajectory, build_vocabulary, AnnotationConfig, InstructionId, VocabMode, Vocabulary,
};
use motionloop_core::control::{run_episode, stream_seed, verify_episode, Components, EpisodeConfig};
use motionloop_core::lifecycle::{build_correction_dataset, BalanceConfig, CorrectionRecord, CorrectionSource};
use motionloop_core::policy::{diffuse_with, make_schedule};
use motionloop_core::sim::{
    faulty_predictor, instruction_follower, oracle_corrector, oracle_predictor, OracleContext, SimConfig, TaskSpec,
};
use motionloop_core::trajdata::{
    load_trajectories, save_trajectories, Action, GripperCmd, Observation, Source, Step, Trajectory,
};
use proptest::prelude::*;

fn vocab() -> Vocabulary {
    build_vocabulary(&AnnotationConfig::default(), VocabMode::Combined).unwrap()
}

fn grip() -> impl Strategy<Value = GripperCmd> {
    prop_oneof![Just(GripperCmd::Open), Just(GripperCmd::Close), Just(GripperCmd::Hold)]
}

fn step() -> impl Strategy<Value = Step> {
    (
        (-0.2f64..=0.2, -0.2f64..=0.2, 0.0f64..=0.3),
        0.0f64..=1.0,
        proptest::collection::btree_map("[a-z]{1,6}", prop::array::uniform3(-1.0f64..1.0), 0..3),
        prop::option::of(0u8..6),
        prop::array::uniform3(-1.0f64..=1.0),
        grip(),
    )
        .prop_map(|((x, y, z), w, objects, phase, dp, g)| Step {
            obs: Observation { eef_pos: [x, y, z], gripper_width: w, object_poses: objects, task_phase_hint: phase },
            act: Action { delta_pos: dp, gripper_cmd: g },
        })
}

fn trajectory(id: usize) -> impl Strategy<Value = Trajectory> {
    (
        proptest::collection::vec(step(), 1..30),
        prop::option::of(any::<bool>()),
        1e-4f64..0.1,
        prop_oneof![Just(Source::Expert), Just(Source::Rollout), Just(Source::Refined)],
    )
        .prop_map(move |(steps, success, max_step_m, source)| Trajectory {
            id: format!("t{id}"),
            task: "pick_place".into(),
            source,
            success,
            max_step_m,
            steps,
        })
}

fn record(class: usize, source: usize, period: usize) -> CorrectionRecord {
    let obs = Observation {
        eef_pos: [0.0, 0.0, 0.1],
        gripper_width: 1.0,
        object_poses: BTreeMap::new(),
        task_phase_hint: None,
    };
    let sources =
        [CorrectionSource::OnlineIntervention, CorrectionSource::OfflineAnnotation, CorrectionSource::ExpertDemo];
    CorrectionRecord {
        source: sources[source % 3],
        task: "pick_place".into(),
        origin: format!("e{period}"),
        period,
        window: vec![obs],
        m_i: InstructionId(0),
        failure: class > 0,
        semantic: String::new(),
        m_a: (class > 0).then_some(InstructionId(class)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trajectories_round_trip_exactly(trajs in (1usize..4).prop_flat_map(|n| {
        (0..n).map(trajectory).collect::<Vec<_>>()
    })) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let manifest = save_trajectories(&trajs, &path).unwrap();
        prop_assert_eq!(manifest.counts.total(), trajs.len());
        prop_assert_eq!(load_trajectories(&path).unwrap(), trajs);
    }

    #[test]
    fn annotations_partition_and_match_oracle(seed in any::<u64>(), windows in 1usize..40, tail in 0usize..10) {
        let cfg = AnnotationConfig::default();
        let vocab = vocab();
        let (mut traj, _) = common::synthetic_trajectory(seed, windows, cfg.window);
        traj.steps.truncate(traj.steps.len() - tail.min(cfg.window - 1));
        let anns = annotate_trajectory(&traj, &cfg, &vocab).unwrap();
        prop_assert_eq!(anns.len(), traj.steps.len().div_ceil(cfg.window));
        let mut next = 0;
        let mut closed = false;
        for a in &anns {
            prop_assert_eq!(a.span.0, next);
            prop_assert!(a.span.1 > a.span.0 && a.span.1 - a.span.0 <= cfg.window);
            next = a.span.1;
            prop_assert!(vocab.contains(a.instr));
            prop_assert!(vocab.form(a.instr).directions().len() <= cfg.max_directions);
            let acts: Vec<Action> = traj.steps[a.span.0..a.span.1].iter().map(|s| s.act).collect();
            let (text, after) = common::brute_force_label(&acts, closed, cfg.threshold);
            closed = after;
            prop_assert_eq!(vocab.text(a.instr), text.as_str());
        }
        prop_assert_eq!(next, traj.steps.len());
    }

    #[test]
    fn mirrored_actions_mirror_directions(seed in any::<u64>()) {
        let cfg = AnnotationConfig::default();
        let vocab = vocab();
        let (traj, _) = common::synthetic_trajectory(seed, 8, cfg.window);
        let mut mirrored = traj.clone();
        for s in &mut mirrored.steps {
            s.act.delta_pos = s.act.delta_pos.map(|v| -v);
        }
        let a = annotate_trajectory(&traj, &cfg, &vocab).unwrap();
        let b = annotate_trajectory(&mirrored, &cfg, &vocab).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let dx = vocab.form(x.instr).directions();
            let dy = vocab.form(y.instr).directions();
            prop_assert_eq!(dx.len(), dy.len());
            for (p, q) in dx.iter().zip(dy) {
                prop_assert_eq!(p.axis, q.axis);
                prop_assert_eq!(p.sign.as_f64(), -q.sign.as_f64());
            }
        }
    }

    #[test]
    fn balancing_never_grows_or_drops_classes(
        spec in proptest::collection::vec((0usize..5, 0usize..3), 1..200),
        cap in 1usize..5,
        seed in any::<u64>(),
    ) {
        let records: Vec<CorrectionRecord> =
            spec.iter().enumerate().map(|(i, &(c, s))| record(c, s, i)).collect();
        let (_, before) = build_correction_dataset(records.clone(), None).unwrap();
        let cfg = BalanceConfig { cap_ratio: cap, seed };
        let (kept, after) = build_correction_dataset(records.clone(), Some(cfg)).unwrap();
        prop_assert_eq!(
            before.per_class.keys().collect::<BTreeSet<_>>(),
            after.per_class.keys().collect::<BTreeSet<_>>()
        );
        let smallest = *before.per_class.values().min().unwrap();
        for (class, n) in &after.per_class {
            prop_assert!(*n <= before.per_class[class]);
            prop_assert!(*n <= smallest * cap);
        }
        // kept records are an order-preserving subsequence of the input
        let mut it = records.iter();
        for r in &kept {
            prop_assert!(it.any(|x| x == r));
        }
        let (again, _) = build_correction_dataset(records, Some(cfg)).unwrap();
        prop_assert_eq!(kept, again);
    }

    #[test]
    fn schedules_are_monotone(k in 1usize..200, lo in 1e-5f64..0.05, span in 1e-4f64..0.5) {
        let hi = (lo + span).min(0.99);
        let s = make_schedule(k, lo, hi).unwrap();
        prop_assert_eq!(s.steps(), k);
        prop_assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn diffusion_interpolates_energy(a0 in proptest::collection::vec(-1.0f64..1.0, 1..12), ab in 0.0f64..=1.0) {
        let eps: Vec<f64> = a0.iter().map(|v| 0.5 - v).collect();
        let x = diffuse_with(&a0, &eps, ab);
        for ((xi, ai), ei) in x.iter().zip(&a0).zip(&eps) {
            prop_assert!((xi - (ab.sqrt() * ai + (1.0 - ab).sqrt() * ei)).abs() < 1e-12);
        }
    }

    #[test]
    fn stream_seeds_separate_streams(seed in any::<u64>()) {
        prop_assert_ne!(stream_seed(seed, 1), stream_seed(seed, 2));
        prop_assert_eq!(stream_seed(seed, 0), seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn episodes_replay_and_conform(seed in any::<u64>(), p in 0.0f64..=1.0, corrector in any::<bool>()) {
        let vocab = Arc::new(vocab());
        let ctx = Arc::new(OracleContext::new(TaskSpec::pick_place(), SimConfig::default(), AnnotationConfig::default(), vocab.clone()));
        let cfg = EpisodeConfig { budget: ctx.spec.max_periods, ..Default::default() };
        let run = || {
            let mut mpm = faulty_predictor(oracle_predictor(ctx.clone()), p, vocab.len(), seed);
            let mut mcm = oracle_corrector(ctx.clone(), 0.05);
            let mut policy = instruction_follower(ctx.clone());
            let parts = Components {
                mpm: &mut mpm,
                mcm: if corrector { Some(&mut mcm) } else { None },
                policy: &mut policy,
                hook: None,
            };
            run_episode(&ctx.spec, &ctx.sim, &cfg, seed, parts).unwrap()
        };
        let first = run();
        prop_assert!(verify_episode(&first).is_ok());
        prop_assert!(first.env_steps <= first.budget * first.chunk);
        if !corrector {
            prop_assert_eq!(first.corrections(), 0);
        }
        prop_assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&run()).unwrap());
    }
}
