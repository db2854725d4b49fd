use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use motionloop_core::annotate::{annotate_trajectory, build_vocabulary, AnnotationRecord, VocabMode, Vocabulary};
use motionloop_core::codebook::{embed_vocabulary, mean_off_diagonal, similarity_matrix, NgramEmbedder};
use motionloop_core::control::{ChunkPolicy, EpisodeRecord, MotionCorrector};
use motionloop_core::lifecycle::{
    build_correction_dataset, deployment_eval_set, episode_records, evaluate, expert_windows, lifelong_curve,
    mix_datasets, refined_windows, train_predictor, write_curve_csv, write_records_jsonl, write_table_csv,
    CorrectionSource, EvalReport, EvalSetup, LifelongEnv,
};
use motionloop_core::policy::{
    build_examples, save_checkpoint, train, write_loss_curve, MotionConditioning, NoiseSchedule, PolicyModel,
};
use motionloop_core::sim::{collect_demos, instruction_follower, oracle_corrector, OracleContext, TaskKind, TaskSpec};
use motionloop_core::trajdata::{load_trajectories, save_trajectories, DatasetManifest, Trajectory};

use crate::arms::ArmKit;
use crate::config::{Conditioning, Config, CorrectorKind, PolicyKind, PredictorKind};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "motionloop",
    version,
    about = "Motion-instruction annotation, policy training and corrected rollouts"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the instruction vocabulary.
    Vocab(VocabArgs),
    /// Label trajectories with motion instructions.
    Annotate(AnnotateArgs),
    /// Record scripted demonstrations.
    Demos(DemosArgs),
    /// Train the motion-conditioned diffusion policy.
    TrainPolicy(TrainPolicyArgs),
    /// Fit the learned motion predictor.
    TrainPredictor(TrainPredictorArgs),
    /// Run episodes and write their records.
    Rollout(RolloutArgs),
    /// Success rates per task.
    Eval(EvalArgs),
    /// Iterate rollouts and predictor retraining.
    Lifelong(LifelongArgs),
    /// Serve the intervention API.
    Serve(ServeArgs),
    /// Similarity matrix of the motion conditioning table as CSV.
    CodebookReport(CodebookArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Combined,
    Flat,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Comma-separated axis names.
    #[arg(long, value_delimiter = ',')]
    pub axes: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Print the vocabulary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemosArgs {
    #[arg(long)]
    pub count: Option<usize>,
    /// Probability of executing a random instruction for one period.
    #[arg(long)]
    pub perturb: Option<f64>,
    #[arg(long)]
    pub task: Option<String>,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPolicyArgs {
    /// Demonstration trajectories (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub conditioning: Option<CondArg>,
    /// Write per-epoch losses as CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CondArg {
    Learned,
    Frozen,
}

#[derive(Debug, Args)]
pub struct TrainPredictorArgs {
    /// Expert demonstrations (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Episode records whose successful periods are added with their
    /// executed instructions as labels.
    #[arg(long)]
    pub refined: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ArmArgs {
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorArg>,
    #[arg(long)]
    pub predictor_path: Option<PathBuf>,
    #[arg(long)]
    pub corruption: Option<f64>,
    #[arg(long, value_enum)]
    pub corrector: Option<CorrectorArg>,
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PredictorArg {
    Oracle,
    Learned,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CorrectorArg {
    None,
    Oracle,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Follower,
    Diffusion,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub arm: ArmArgs,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    /// Episode records (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Correction records of the flagged periods (JSONL).
    #[arg(long)]
    pub corrections: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub arm: ArmArgs,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Comma-separated tasks; defaults to the configured task.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LifelongArgs {
    /// Cumulative rollout counts at which to retrain.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<usize>>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub arm: ArmArgs,
    #[arg(long)]
    pub addr: Option<String>,
    /// Wait for a decision at every period.
    #[arg(long)]
    pub step_gate: bool,
    #[arg(long)]
    pub period_ms: Option<u64>,
    /// Append correction records to this JSONL file.
    #[arg(long)]
    pub export: Option<PathBuf>,
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CodebookArgs {
    /// Policy checkpoint whose conditioning table is reported.
    #[arg(long, conflicts_with = "frozen")]
    pub checkpoint: Option<PathBuf>,
    /// Report the frozen text features instead.
    #[arg(long)]
    pub frozen: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ArmArgs {
    fn apply(&self, cfg: &mut Config) {
        if let Some(t) = &self.task {
            cfg.task = t.clone();
        }
        if let Some(p) = self.predictor {
            cfg.arm.predictor = match p {
                PredictorArg::Oracle => PredictorKind::Oracle,
                PredictorArg::Learned => PredictorKind::Learned,
                PredictorArg::Remote => PredictorKind::Remote,
            };
        }
        if let Some(p) = &self.predictor_path {
            cfg.arm.predictor_path = Some(p.clone());
        }
        if let Some(c) = self.corruption {
            cfg.arm.corruption = c;
        }
        if let Some(c) = self.corrector {
            cfg.arm.corrector = match c {
                CorrectorArg::None => CorrectorKind::None,
                CorrectorArg::Oracle => CorrectorKind::Oracle,
                CorrectorArg::Remote => CorrectorKind::Remote,
            };
        }
        if let Some(p) = self.policy {
            cfg.arm.policy = match p {
                PolicyArg::Follower => PolicyKind::Follower,
                PolicyArg::Diffusion => PolicyKind::Diffusion,
            };
        }
        if let Some(c) = &self.checkpoint {
            cfg.arm.checkpoint = Some(c.clone());
            if self.policy.is_none() {
                cfg.arm.policy = PolicyKind::Diffusion;
            }
        }
    }
}

/// Loads the configuration, applies flag overrides and runs the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    match &cli.command {
        Command::Vocab(a) => {
            if let Some(axes) = &a.axes {
                cfg.annotation.axes = axes.iter().map(|s| s.trim().to_string()).collect();
            }
            if let Some(m) = a.mode {
                cfg.vocab_mode = match m {
                    ModeArg::Combined => VocabMode::Combined,
                    ModeArg::Flat => VocabMode::Flat,
                };
            }
        }
        Command::Annotate(a) => {
            if let Some(w) = a.window {
                cfg.annotation.window = w;
            }
            if let Some(t) = a.threshold {
                cfg.annotation.threshold = t;
            }
        }
        Command::Demos(a) => {
            if let Some(n) = a.count {
                cfg.demos.count = n;
            }
            if let Some(p) = a.perturb {
                cfg.demos.perturb_prob = p;
            }
            if let Some(t) = &a.task {
                cfg.task = t.clone();
            }
        }
        Command::TrainPolicy(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(c) = a.conditioning {
                cfg.policy.conditioning = match c {
                    CondArg::Learned => Conditioning::Learned,
                    CondArg::Frozen => Conditioning::Frozen,
                };
            }
        }
        Command::TrainPredictor(a) => {
            if let Some(e) = a.epochs {
                cfg.predictor.epochs = e;
            }
        }
        Command::Rollout(a) => a.arm.apply(&mut cfg),
        Command::Eval(a) => a.arm.apply(&mut cfg),
        Command::Lifelong(a) => {
            if let Some(c) = &a.checkpoints {
                cfg.curve.checkpoints = c.clone();
            }
        }
        Command::Serve(a) => {
            a.arm.apply(&mut cfg);
            if let Some(addr) = &a.addr {
                cfg.serve.addr = addr.clone();
            }
            cfg.serve.step_gate |= a.step_gate;
            if let Some(p) = a.period_ms {
                cfg.serve.period_ms = p;
            }
            if let Some(e) = &a.export {
                cfg.serve.export = Some(e.clone());
            }
            if let Some(u) = &a.ui_dir {
                cfg.serve.ui_dir = Some(u.clone());
            }
        }
        Command::CodebookReport(_) => {}
    }
    cfg.validate()?;
    let vocab =
        Arc::new(build_vocabulary(&cfg.annotation, cfg.vocab_mode).map_err(|e| CliError::Config(e.to_string()))?);
    match cli.command {
        Command::Vocab(a) => vocab_cmd(&vocab, a.json),
        Command::Annotate(a) => annotate_cmd(&cfg, &vocab, &a.input, &a.output),
        Command::Demos(a) => demos_cmd(&cfg, &vocab, &a.output),
        Command::TrainPolicy(a) => train_policy_cmd(&cfg, &vocab, &a),
        Command::TrainPredictor(a) => train_predictor_cmd(&cfg, &vocab, &a),
        Command::Rollout(a) => rollout_cmd(&cfg, &vocab, &a),
        Command::Eval(a) => eval_cmd(&cfg, &vocab, &a),
        Command::Lifelong(a) => lifelong_cmd(&cfg, &vocab, &a),
        Command::Serve(_) => crate::server::serve(&cfg, vocab),
        Command::CodebookReport(a) => codebook_cmd(&vocab, &a),
    }
}

fn context(cfg: &Config, vocab: &Arc<Vocabulary>) -> Result<Arc<OracleContext>, CliError> {
    Ok(Arc::new(OracleContext::new(cfg.task_spec()?, cfg.sim.clone(), cfg.annotation.clone(), vocab.clone())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(CliError::runtime)?;
    writeln!(w).and_then(|_| w.flush()).map_err(CliError::runtime)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn load(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    load_trajectories(path).map_err(CliError::runtime)
}

fn vocab_cmd(vocab: &Vocabulary, json: bool) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    if json {
        serde_json::to_writer_pretty(&mut out, vocab).map_err(CliError::runtime)?;
        writeln!(out).map_err(CliError::runtime)?;
        return Ok(());
    }
    for id in vocab.ids() {
        writeln!(out, "{}\t{}", id.0, vocab.text(id)).map_err(CliError::runtime)?;
    }
    Ok(())
}

fn annotate_cmd(cfg: &Config, vocab: &Vocabulary, input: &Path, output: &Path) -> Result<(), CliError> {
    let trajs = load(input)?;
    let mut w = create(output)?;
    let mut windows = 0;
    for t in &trajs {
        for a in annotate_trajectory(t, &cfg.annotation, vocab).map_err(CliError::runtime)? {
            let rec =
                AnnotationRecord { traj: t.id.clone(), span: a.span, instr: a.instr, text: vocab.text(a.instr).into() };
            serde_json::to_writer(&mut w, &rec).map_err(CliError::runtime)?;
            writeln!(w).map_err(CliError::runtime)?;
            windows += 1;
        }
    }
    w.flush().map_err(CliError::runtime)?;
    let manifest = DatasetManifest::for_trajectories(&trajs).with_annotation(&vocab.id, &cfg.annotation.fingerprint());
    write_json(&manifest_path(output), &manifest)?;
    println!("annotated {} trajectories, {windows} windows -> {}", trajs.len(), output.display());
    Ok(())
}

fn demos_cmd(cfg: &Config, vocab: &Arc<Vocabulary>, output: &Path) -> Result<(), CliError> {
    let ctx = context(cfg, vocab)?;
    let demos = cfg.demos.collect(ctx);
    let manifest = save_trajectories(&demos, output).map_err(CliError::runtime)?;
    write_json(&manifest_path(output), &manifest)?;
    println!("recorded {} demonstrations -> {}", demos.len(), output.display());
    Ok(())
}

fn train_policy_cmd(cfg: &Config, vocab: &Arc<Vocabulary>, a: &TrainPolicyArgs) -> Result<(), CliError> {
    let demos = load(&a.data)?;
    let dims = cfg.policy.dims;
    let data = build_examples(&demos, &cfg.annotation, vocab, &dims).map_err(CliError::runtime)?;
    let sched = NoiseSchedule::default_for(cfg.policy.diffusion_steps).map_err(|e| CliError::Config(e.to_string()))?;
    let cond = match cfg.policy.conditioning {
        Conditioning::Learned => {
            MotionConditioning::learned(vocab, cfg.policy.codebook_dim, cfg.train.seed).map_err(CliError::runtime)?
        }
        Conditioning::Frozen => MotionConditioning::frozen(vocab, &NgramEmbedder::default()),
    };
    let mut model = PolicyModel::new(dims, cond, cfg.train.seed).map_err(|e| CliError::Config(e.to_string()))?;
    info!("training on {} examples, {} parameters", data.len(), model.param_count());
    let stats = train(&mut model, &sched, &data, &cfg.train, |s| {
        info!("epoch {} loss {:.5}", s.epoch, s.mean_loss);
    })
    .map_err(CliError::runtime)?;
    save_checkpoint(&model, &sched, &a.out).map_err(CliError::runtime)?;
    if let Some(path) = &a.loss_csv {
        let mut w = create(path)?;
        write_loss_curve(&stats, &mut w).and_then(|_| w.flush()).map_err(CliError::runtime)?;
    }
    let last = stats.last().map(|s| s.mean_loss).unwrap_or(f64::NAN);
    println!("trained {} epochs on {} examples, final loss {last:.5} -> {}", stats.len(), data.len(), a.out.display());
    Ok(())
}

fn read_episodes(path: &Path) -> Result<Vec<EpisodeRecord>, CliError> {
    let f = File::open(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(CliError::runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn train_predictor_cmd(cfg: &Config, vocab: &Arc<Vocabulary>, a: &TrainPredictorArgs) -> Result<(), CliError> {
    let demos = load(&a.data)?;
    let mut data = expert_windows(&demos, &cfg.annotation, vocab, cfg.episode.history, cfg.sim.chunk)
        .map_err(CliError::runtime)?;
    if let Some(path) = &a.refined {
        data.extend(refined_windows(&read_episodes(path)?, cfg.episode.history));
    }
    let p = train_predictor(&data, vocab.len(), &cfg.predictor).map_err(CliError::runtime)?;
    write_json(&a.out, &p)?;
    println!("fit predictor on {} windows, train accuracy {:.3} -> {}", data.len(), p.train_accuracy, a.out.display());
    Ok(())
}

fn run_arm(
    cfg: &Config,
    vocab: &Arc<Vocabulary>,
    tasks: &[TaskSpec],
    trials: usize,
) -> Result<(EvalReport, Vec<EpisodeRecord>), CliError> {
    let ctx = context(cfg, vocab)?;
    let kits = tasks
        .iter()
        .map(|t| {
            let c = Arc::new(OracleContext::new(t.clone(), cfg.sim.clone(), cfg.annotation.clone(), vocab.clone()));
            ArmKit::new(c, &cfg.arm, cfg.policy.noise_scale).map(|k| (t.kind, k))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let setup = EvalSetup {
        method: ArmKit::new(ctx, &cfg.arm, cfg.policy.noise_scale)?.label(),
        sim: cfg.sim.clone(),
        episode: cfg.episode_for(&tasks[0]),
        trials,
        seed: cfg.seed,
    };
    evaluate(tasks, &setup, |spec, seed| {
        let kit = &kits.iter().find(|(k, _)| *k == spec.kind).expect("kit per task").1;
        kit.build(seed)
    })
    .map_err(CliError::runtime)
}

fn rollout_cmd(cfg: &Config, vocab: &Arc<Vocabulary>, a: &RolloutArgs) -> Result<(), CliError> {
    if a.episodes == 0 {
        return Err(CliError::Config("--episodes must be at least 1".into()));
    }
    let spec = cfg.task_spec()?;
    let (report, records) = run_arm(cfg, vocab, &[spec], a.episodes)?;
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        for r in &records {
            serde_json::to_writer(&mut w, r).map_err(CliError::runtime)?;
            writeln!(w).map_err(CliError::runtime)?;
        }
        w.flush().map_err(CliError::runtime)?;
    }
    if let Some(path) = &a.corrections {
        let recs: Vec<_> = records
            .iter()
            .flat_map(|r| episode_records(r, CorrectionSource::OfflineAnnotation, cfg.episode.history))
            .collect();
        let mut w = create(path)?;
        if !recs.is_empty() {
            let (recs, manifest) = build_correction_dataset(recs, None).map_err(CliError::runtime)?;
            write_records_jsonl(&recs, &mut w).map_err(CliError::runtime)?;
            println!("{} correction records ({})", manifest.total, manifest.summary());
        }
        w.flush().map_err(CliError::runtime)?;
    }
    let corrections: usize = records.iter().map(|r| r.corrections()).sum();
    println!(
        "{}: {}/{} successful ({:.1}%), {corrections} corrections",
        report.method,
        records.iter().filter(|r| r.success).count(),
        records.len(),
        report.mean_success * 100.0
    );
    Ok(())
}

fn eval_cmd(cfg: &Config, vocab: &Arc<Vocabulary>, a: &EvalArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    let names = a.tasks.clone().unwrap_or_else(|| vec![cfg.task.clone()]);
    let tasks = names
        .iter()
        .map(|n| {
            TaskKind::parse(n.trim())
                .map(TaskSpec::by_kind)
                .ok_or_else(|| CliError::Config(format!("unknown task `{n}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (report, _) = run_arm(cfg, vocab, &tasks, a.trials)?;
    if let Some(path) = &a.json {
        write_json(path, &report)?;
    }
    if let Some(path) = &a.csv {
        let mut w = create(path)?;
        write_table_csv(std::slice::from_ref(&report), &mut w).and_then(|_| w.flush()).map_err(CliError::runtime)?;
    }
    let stdout = std::io::stdout();
    write_table_csv(&[report], stdout.lock()).map_err(CliError::runtime)
}

fn lifelong_cmd(cfg: &Config, vocab: &Arc<Vocabulary>, a: &LifelongArgs) -> Result<(), CliError> {
    let ctx = context(cfg, vocab)?;
    let c = &cfg.curve;
    let none = motionloop_core::sim::FaultConfig::default();
    let expert = collect_demos(ctx.clone(), c.expert_pool, cfg.seed.wrapping_add(7), 0.0, &none);
    let held = collect_demos(ctx.clone(), c.held_out_demos, cfg.seed.wrapping_add(8), 0.0, &none);
    let (history, chunk) = (cfg.lifelong.episode.history, cfg.sim.chunk);
    let held = expert_windows(&held, &cfg.annotation, vocab, history, chunk).map_err(CliError::runtime)?;
    let seed_set = mix_datasets(&[], &expert, c.initial_demos, cfg.lifelong.mix_seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let seed_windows = seed_set.windows(&cfg.annotation, vocab, history, chunk).map_err(CliError::runtime)?;
    let initial = train_predictor(&seed_windows, vocab.len(), &cfg.lifelong.predictor).map_err(CliError::runtime)?;
    let cc = ctx.clone();
    let fail_dist = cfg.arm.fail_dist;
    let corrector = move |_: u64| -> Box<dyn MotionCorrector> { Box::new(oracle_corrector(cc.clone(), fail_dist)) };
    let pc = ctx.clone();
    let policy = move |_: u64| -> Box<dyn ChunkPolicy> { Box::new(instruction_follower(pc.clone())) };
    let deployment = deployment_eval_set(
        &ctx,
        &initial,
        &policy,
        cfg.lifelong.rollout_corruption,
        c.deployment_episodes,
        cfg.seed.wrapping_add(90_000),
        &cfg.lifelong.episode,
    )
    .map_err(CliError::runtime)?;
    let env = LifelongEnv {
        ctx: ctx.clone(),
        expert: &expert,
        expert_eval: &held,
        deployment_eval: &deployment,
        corrector: &corrector,
        policy: &policy,
    };
    let (_, reports) = lifelong_curve(&env, initial, &c.checkpoints, &cfg.lifelong).map_err(|e| match e {
        motionloop_core::lifecycle::LifecycleError::ConfigInvalid(m) => CliError::Config(m),
        other => CliError::runtime(other),
    })?;
    if let Some(path) = &a.json {
        write_json(path, &reports)?;
    }
    if let Some(path) = &a.csv {
        let mut w = create(path)?;
        write_curve_csv(&reports, &mut w).and_then(|_| w.flush()).map_err(CliError::runtime)?;
    }
    let stdout = std::io::stdout();
    write_curve_csv(&reports, stdout.lock()).map_err(CliError::runtime)
}

fn codebook_cmd(vocab: &Vocabulary, a: &CodebookArgs) -> Result<(), CliError> {
    let rows: Vec<Vec<f64>> = match (&a.checkpoint, a.frozen) {
        (Some(path), _) => {
            let (model, _) = motionloop_core::policy::load_checkpoint(path)
                .map_err(|e| CliError::Runtime(format!("cannot load {}: {e}", path.display())))?;
            let t = &model.motion.table;
            if t.entries.len() != vocab.len() * t.dim {
                return Err(CliError::Config(format!(
                    "checkpoint table has {} rows, vocabulary has {}",
                    t.entries.len() / t.dim.max(1),
                    vocab.len()
                )));
            }
            t.entries.chunks(t.dim).map(|r| r.to_vec()).collect()
        }
        (None, true) => embed_vocabulary(vocab, &NgramEmbedder::default()),
        (None, false) => return Err(CliError::Config("pass --checkpoint or --frozen".into())),
    };
    let sim = similarity_matrix(&rows).map_err(CliError::runtime)?;
    let mut text = String::from("id");
    for j in 0..sim.len() {
        text.push_str(&format!(",{j}"));
    }
    text.push('\n');
    for (i, row) in sim.iter().enumerate() {
        text.push_str(&i.to_string());
        for v in row {
            text.push_str(&format!(",{v:.6}"));
        }
        text.push('\n');
    }
    match &a.out {
        Some(path) => std::fs::write(path, &text).map_err(CliError::runtime)?,
        None => print!("{text}"),
    }
    eprintln!("mean off-diagonal cosine {:.4}", mean_off_diagonal(&sim));
    Ok(())
}
