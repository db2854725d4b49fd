//! Motion-conditioned diffusion policy.
//!
//! Observation history is embedded per step and pooled by single-head
//! attention with the latest step as query. The denoiser is a two-layer MLP:
//! the observation feature enters at the input, the motion feature is added
//! after a linear map into the second hidden layer.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::{label_actions, AnnotateError, AnnotationConfig, GripperState, InstructionId, Vocabulary};
use crate::codebook::{embed_vocabulary, init_codebook, CodebookError, MotionCodebook, TextEmbedder};
use crate::control::{ChunkPolicy, ControlError};
use crate::nn::{silu, silu_grad, softmax, timestep_embedding, Linear, Optimizer, OptimizerKind};
use crate::sim::{CUBE, TARGET};
use crate::trajdata::{Action, GripperCmd, Observation, Trajectory};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Values per action row: dx, dy, dz, gripper logit.
pub const ACTION_DIM: usize = 4;
pub const OBS_FEATURES: usize = 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Linear schedule whose total noise matches the 1000-step
    /// `1e-4 .. 0.02` schedule, compressed to `k` steps.
    pub fn default_for(k: usize) -> Result<Self, PolicyError> {
        let scale = 1000.0 / k.max(1) as f64;
        make_schedule(k, (1e-4 * scale).min(0.5), (0.02 * scale).min(0.999))
    }

    fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        NoiseSchedule { beta, alpha, alpha_bar }
    }
}

pub fn make_schedule(k: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, PolicyError> {
    if k == 0 {
        return Err(PolicyError::ConfigInvalid("K must be at least 1".into()));
    }
    let single = k == 1 && beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max;
    if !single && !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(PolicyError::ConfigInvalid(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let beta = if k == 1 {
        vec![beta_max]
    } else {
        (0..k).map(|i| beta_min + (beta_max - beta_min) * i as f64 / (k - 1) as f64).collect()
    };
    Ok(NoiseSchedule::from_betas(beta))
}

/// Schedule from explicit betas (strictly increasing, each in (0, 1)).
pub fn schedule_from_betas(beta: Vec<f64>) -> Result<NoiseSchedule, PolicyError> {
    if beta.is_empty() || beta.iter().any(|b| !(0.0 < *b && *b < 1.0)) || beta.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PolicyError::ConfigInvalid("betas must be strictly increasing in (0, 1)".into()));
    }
    Ok(NoiseSchedule::from_betas(beta))
}

pub fn forward_diffuse(a0: &[f64], k: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, PolicyError> {
    if a0.len() != eps.len() {
        return Err(PolicyError::ShapeMismatch { expected: a0.len(), got: eps.len() });
    }
    if k >= sched.steps() {
        return Err(PolicyError::ConfigInvalid(format!("k = {k} outside 0..{}", sched.steps())));
    }
    Ok(diffuse_with(a0, eps, sched.alpha_bar[k]))
}

/// `sqrt(ab) * a0 + sqrt(1 - ab) * eps`.
pub fn diffuse_with(a0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    a0.iter().zip(eps).map(|(a, e)| s * a + n * e).collect()
}

/// Low-dimensional observation features. The oracle phase hint is ignored.
pub fn observation_features(obs: &Observation) -> [f64; OBS_FEATURES] {
    let mut f = [0.0; OBS_FEATURES];
    for i in 0..3 {
        f[i] = obs.eef_pos[i] * 5.0;
    }
    f[3] = obs.gripper_width;
    for (slot, name) in [(4, CUBE), (11, TARGET)] {
        if let Some(p) = obs.object_poses.get(name) {
            f[slot] = 1.0;
            for i in 0..3 {
                let rel = p[i] - obs.eef_pos[i];
                f[slot + 1 + i] = rel * 10.0;
                f[slot + 4 + i] = (rel / 0.02).clamp(-1.0, 1.0);
            }
        }
    }
    f
}

/// Stacked features of a padded observation window.
pub fn window_features(window: &[Observation]) -> Vec<f64> {
    window.iter().flat_map(observation_features).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyDims {
    pub embed: usize,
    pub hidden: usize,
    pub time_embed: usize,
    pub history: usize,
    pub chunk: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims { embed: 64, hidden: 256, time_embed: 32, history: 5, chunk: 4 }
    }
}

impl PolicyDims {
    pub fn chunk_len(&self) -> usize {
        self.chunk * ACTION_DIM
    }

    fn input_dim(&self) -> usize {
        self.chunk_len() + self.time_embed + self.embed
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.embed == 0
            || self.hidden == 0
            || self.history == 0
            || self.chunk == 0
            || !self.time_embed.is_multiple_of(2)
        {
            return Err(PolicyError::ConfigInvalid(format!("bad dims {self:?}")));
        }
        Ok(())
    }
}

/// Conditioning table: a trainable codebook, or frozen text features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionConditioning {
    pub table: MotionCodebook,
    pub trainable: bool,
}

impl MotionConditioning {
    pub fn learned(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<Self, PolicyError> {
        Ok(MotionConditioning { table: init_codebook(vocab, dim, seed)?, trainable: true })
    }

    /// Fixed embeddings of the canonical instruction texts.
    pub fn frozen(vocab: &Vocabulary, embedder: &dyn TextEmbedder) -> Self {
        let rows = embed_vocabulary(vocab, embedder);
        let dim = embedder.dim();
        MotionConditioning {
            table: MotionCodebook { vocab_id: vocab.id.clone(), dim, rng_seed: 0, entries: rows.concat() },
            trainable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub dims: PolicyDims,
    pub seed: u64,
    pub embed: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub l1: Linear,
    pub l2: Linear,
    pub motion_proj: Linear,
    pub out: Linear,
    pub motion: MotionConditioning,
}

const LAYER_NAMES: [&str; 8] = ["embed", "query", "key", "value", "l1", "l2", "motion_proj", "out"];

impl PolicyModel {
    pub fn new(dims: PolicyDims, motion: MotionConditioning, seed: u64) -> Result<Self, PolicyError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.embed;
        Ok(PolicyModel {
            dims,
            seed,
            embed: Linear::init(OBS_FEATURES, d, &mut rng),
            query: Linear::init(d, d, &mut rng),
            key: Linear::init(d, d, &mut rng),
            value: Linear::init(d, d, &mut rng),
            l1: Linear::init(dims.input_dim(), dims.hidden, &mut rng),
            l2: Linear::init(dims.hidden, dims.hidden, &mut rng),
            motion_proj: Linear::init(motion.table.dim, dims.hidden, &mut rng),
            out: Linear::init(dims.hidden, dims.chunk_len(), &mut rng),
            motion,
        })
    }

    fn layers(&self) -> [&Linear; 8] {
        [&self.embed, &self.query, &self.key, &self.value, &self.l1, &self.l2, &self.motion_proj, &self.out]
    }

    fn layers_mut(&mut self) -> [&mut Linear; 8] {
        [
            &mut self.embed,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.l1,
            &mut self.l2,
            &mut self.motion_proj,
            &mut self.out,
        ]
    }

    pub fn param_count(&self) -> usize {
        let dense: usize = self.layers().iter().map(|l| l.param_count()).sum();
        dense + if self.motion.trainable { self.motion.table.entries.len() } else { 0 }
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.is_finite()) && self.motion.table.entries.iter().all(|v| v.is_finite())
    }

    pub fn motion_feature(&self, id: InstructionId) -> Result<&[f64], PolicyError> {
        Ok(self.motion.table.lookup(id)?)
    }

    /// Zeroes every weight and bias (conditioning table untouched).
    pub fn zero_params(&mut self) {
        for l in self.layers_mut() {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Intermediate values of the history encoder.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub embeds: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub query: Vec<f64>,
    pub weights: Vec<f64>,
    pub feature: Vec<f64>,
}

pub fn encode_history(model: &PolicyModel, feats: &[f64]) -> Result<EncoderTrace, PolicyError> {
    let h = model.dims.history;
    if feats.len() != h * OBS_FEATURES {
        return Err(PolicyError::ShapeMismatch { expected: h * OBS_FEATURES, got: feats.len() });
    }
    let d = model.dims.embed;
    let embeds: Vec<Vec<f64>> = feats.chunks_exact(OBS_FEATURES).map(|f| model.embed.forward(f)).collect();
    let keys: Vec<Vec<f64>> = embeds.iter().map(|e| model.key.forward(e)).collect();
    let values: Vec<Vec<f64>> = embeds.iter().map(|e| model.value.forward(e)).collect();
    let query = model.query.forward(&embeds[h - 1]);
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = keys.iter().map(|k| scale * k.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>()).collect();
    let weights = softmax(&scores);
    let mut feature = vec![0.0; d];
    for (w, v) in weights.iter().zip(&values) {
        for (o, x) in feature.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(EncoderTrace { embeds, keys, values, query, weights, feature })
}

#[derive(Debug, Clone)]
struct DenoiseTrace {
    x: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
    y: Vec<f64>,
}

fn denoise(model: &PolicyModel, obs_feature: &[f64], motion: &[f64], noisy: &[f64], k: usize) -> DenoiseTrace {
    let dims = &model.dims;
    let mut x = Vec::with_capacity(dims.input_dim());
    x.extend_from_slice(noisy);
    x.extend(timestep_embedding(k, dims.time_embed));
    x.extend_from_slice(obs_feature);
    let h1_pre = model.l1.forward(&x);
    let h1: Vec<f64> = h1_pre.iter().map(|&v| silu(v)).collect();
    let mut h2_pre = model.l2.forward(&h1);
    let m = model.motion_proj.forward(motion);
    h2_pre.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
    let h2: Vec<f64> = h2_pre.iter().map(|&v| silu(v)).collect();
    let y = model.out.forward(&h2);
    DenoiseTrace { x, h1_pre, h1, h2_pre, h2, y }
}

pub fn predict_noise(
    model: &PolicyModel,
    obs_feature: &[f64],
    motion_feature: &[f64],
    noisy: &[f64],
    k: usize,
) -> Result<Vec<f64>, PolicyError> {
    let dims = &model.dims;
    for (expected, got) in [
        (dims.embed, obs_feature.len()),
        (model.motion_proj.in_dim, motion_feature.len()),
        (dims.chunk_len(), noisy.len()),
    ] {
        if expected != got {
            return Err(PolicyError::ShapeMismatch { expected, got });
        }
    }
    Ok(denoise(model, obs_feature, motion_feature, noisy, k).y)
}

/// Gradients for every dense layer plus the codebook rows touched.
#[derive(Debug, Clone)]
pub struct PolicyGrads {
    pub layers: [Linear; 8],
    pub motion_rows: BTreeMap<usize, Vec<f64>>,
}

impl PolicyGrads {
    fn zeros_like(model: &PolicyModel) -> Self {
        PolicyGrads { layers: model.layers().map(|l| Linear::zeros(l.in_dim, l.out_dim)), motion_rows: BTreeMap::new() }
    }

    fn add(&mut self, other: &PolicyGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
        for (row, g) in &other.motion_rows {
            let e = self.motion_rows.entry(*row).or_insert_with(|| vec![0.0; g.len()]);
            e.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }

    pub fn layer(&self, name: &str) -> Option<&Linear> {
        LAYER_NAMES.iter().position(|n| *n == name).map(|i| &self.layers[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    /// `history x OBS_FEATURES`, oldest first.
    pub features: Vec<f64>,
    pub instr: InstructionId,
    /// `chunk x ACTION_DIM` target actions.
    pub chunk: Vec<f64>,
}

/// A training item with its diffusion step and noise fixed.
#[derive(Debug, Clone, Copy)]
pub struct NoisedItem<'a> {
    pub example: &'a TrainExample,
    pub k: usize,
    pub eps: &'a [f64],
}

fn item_backward(
    model: &PolicyModel,
    sched: &NoiseSchedule,
    item: &NoisedItem,
    scale: f64,
    g: &mut PolicyGrads,
) -> f64 {
    let dims = &model.dims;
    let [g_embed, g_query, g_key, g_value, g_l1, g_l2, g_mp, g_out] = &mut g.layers;
    let enc = encode_history(model, &item.example.features).expect("feature shape checked by caller");
    let motion = model.motion.table.lookup(item.example.instr).expect("instruction checked by caller");
    let noisy = diffuse_with(&item.example.chunk, item.eps, sched.alpha_bar[item.k]);
    let t = denoise(model, &enc.feature, motion, &noisy, item.k);

    let mut loss = 0.0;
    let dy: Vec<f64> =
        t.y.iter()
            .zip(item.eps)
            .map(|(p, e)| {
                loss += (p - e) * (p - e);
                2.0 * (p - e) * scale
            })
            .collect();

    let mut dh2 = vec![0.0; dims.hidden];
    model.out.backward(&t.h2, &dy, g_out, Some(&mut dh2));
    let dh2_pre: Vec<f64> = dh2.iter().zip(&t.h2_pre).map(|(d, z)| d * silu_grad(*z)).collect();
    let mut dh1 = vec![0.0; dims.hidden];
    model.l2.backward(&t.h1, &dh2_pre, g_l2, Some(&mut dh1));
    if model.motion.trainable {
        let mut dm = vec![0.0; motion.len()];
        model.motion_proj.backward(motion, &dh2_pre, g_mp, Some(&mut dm));
        let row = g.motion_rows.entry(item.example.instr.0).or_insert_with(|| vec![0.0; motion.len()]);
        row.iter_mut().zip(&dm).for_each(|(a, b)| *a += b);
    } else {
        model.motion_proj.backward(motion, &dh2_pre, g_mp, None);
    }
    let dh1_pre: Vec<f64> = dh1.iter().zip(&t.h1_pre).map(|(d, z)| d * silu_grad(*z)).collect();
    let mut dx = vec![0.0; t.x.len()];
    model.l1.backward(&t.x, &dh1_pre, g_l1, Some(&mut dx));
    let d_feat = &dx[dims.chunk_len() + dims.time_embed..];

    // attention: feature = sum_t w_t v_t, w = softmax(q . k_t / sqrt(d))
    let h = dims.history;
    let scale_qk = 1.0 / (dims.embed as f64).sqrt();
    let dw: Vec<f64> = enc.values.iter().map(|v| v.iter().zip(d_feat).map(|(a, b)| a * b).sum()).collect();
    let mean_dw: f64 = enc.weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
    let ds: Vec<f64> = enc.weights.iter().zip(&dw).map(|(w, d)| w * (d - mean_dw)).collect();
    let mut dq = vec![0.0; dims.embed];
    let mut de = vec![vec![0.0; dims.embed]; h];
    for s in 0..h {
        let dv: Vec<f64> = d_feat.iter().map(|d| d * enc.weights[s]).collect();
        model.value.backward(&enc.embeds[s], &dv, g_value, Some(&mut de[s]));
        let dk: Vec<f64> = enc.query.iter().map(|q| q * ds[s] * scale_qk).collect();
        model.key.backward(&enc.embeds[s], &dk, g_key, Some(&mut de[s]));
        for (a, k) in dq.iter_mut().zip(&enc.keys[s]) {
            *a += ds[s] * scale_qk * k;
        }
    }
    model.query.backward(&enc.embeds[h - 1], &dq, g_query, Some(&mut de[h - 1]));
    for (s, f) in item.example.features.chunks_exact(OBS_FEATURES).enumerate() {
        model.embed.backward(f, &de[s], g_embed, None);
    }
    loss
}

const GRAD_CHUNK: usize = 16;

/// Mean squared noise-prediction error over items and dims, with gradients.
/// Items are split into fixed chunks reduced in order, so the result does
/// not depend on the thread count.
pub fn loss_and_grads(
    model: &PolicyModel,
    sched: &NoiseSchedule,
    items: &[NoisedItem],
) -> Result<(f64, PolicyGrads), PolicyError> {
    if items.is_empty() {
        return Err(PolicyError::ConfigInvalid("empty batch".into()));
    }
    let n = model.dims.chunk_len();
    for it in items {
        if it.example.features.len() != model.dims.history * OBS_FEATURES {
            return Err(PolicyError::ShapeMismatch {
                expected: model.dims.history * OBS_FEATURES,
                got: it.example.features.len(),
            });
        }
        if it.example.chunk.len() != n || it.eps.len() != n {
            return Err(PolicyError::ShapeMismatch { expected: n, got: it.example.chunk.len().min(it.eps.len()) });
        }
        model.motion.table.lookup(it.example.instr)?;
        if it.k >= sched.steps() {
            return Err(PolicyError::ConfigInvalid(format!("k = {} outside schedule", it.k)));
        }
    }
    let scale = 1.0 / (items.len() * n) as f64;
    let partials: Vec<(f64, PolicyGrads)> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = PolicyGrads::zeros_like(model);
            let loss: f64 = chunk.iter().map(|it| item_backward(model, sched, it, scale, &mut g)).sum();
            (loss, g)
        })
        .collect();
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.add(&g);
    }
    Ok((loss * scale, grads))
}

pub fn apply_grads(model: &mut PolicyModel, opt: &mut Optimizer, grads: &PolicyGrads, lr: f64) {
    for (i, (layer, g)) in model.layers_mut().into_iter().zip(&grads.layers).enumerate() {
        opt.update(2 * i, &mut layer.w, &g.w, lr);
        opt.update(2 * i + 1, &mut layer.b, &g.b, lr);
    }
    if model.motion.trainable {
        for (row, g) in &grads.motion_rows {
            opt.update(64 + row, model.motion.table.row_mut(InstructionId(*row)), g, lr);
        }
    }
}

/// One optimization step. Returns the loss before the update.
pub fn train_step(
    model: &mut PolicyModel,
    opt: &mut Optimizer,
    batch: &[&TrainExample],
    sched: &NoiseSchedule,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<f64, PolicyError> {
    let n = model.dims.chunk_len();
    let ks: Vec<usize> = batch.iter().map(|_| rng.random_range(0..sched.steps())).collect();
    let eps: Vec<f64> = (0..batch.len() * n).map(|_| rng.sample(StandardNormal)).collect();
    let items: Vec<NoisedItem> = batch
        .iter()
        .zip(&ks)
        .zip(eps.chunks_exact(n))
        .map(|((ex, &k), e)| NoisedItem { example: ex, k, eps: e })
        .collect();
    let (loss, grads) = loss_and_grads(model, sched, &items)?;
    if !loss.is_finite() {
        return Err(PolicyError::NonFiniteLoss(0));
    }
    apply_grads(model, opt, &grads, lr);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero over the whole run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 2e-3,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            lr_schedule: LrSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(PolicyError::ConfigInvalid(format!("epochs, batch size and lr must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub median_loss: f64,
    pub steps: u64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Full training run; `on_epoch` sees the stats of each finished epoch.
pub fn train(
    model: &mut PolicyModel,
    sched: &NoiseSchedule,
    data: &[TrainExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>, PolicyError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PolicyError::ConfigInvalid("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let total_steps = (cfg.epochs * data.len().div_ceil(cfg.batch_size)) as f64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(order.len().div_ceil(cfg.batch_size));
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainExample> = idx.iter().map(|&i| &data[i]).collect();
            let lr = match cfg.lr_schedule {
                LrSchedule::Constant => cfg.lr,
                LrSchedule::Cosine => 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos()),
            };
            let loss = train_step(model, &mut opt, &batch, sched, lr, &mut rng).map_err(|e| match e {
                PolicyError::NonFiniteLoss(_) => PolicyError::NonFiniteLoss(step),
                other => other,
            })?;
            losses.push(loss);
            step += 1;
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let s = EpochStats { epoch, mean_loss, median_loss: median(&mut losses), steps: step };
        log::debug!("epoch {epoch}: mean loss {mean_loss:.5}");
        on_epoch(&s);
        stats.push(s);
    }
    Ok(stats)
}

pub fn write_loss_curve(stats: &[EpochStats], w: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "epoch,steps,mean_loss,median_loss")?;
    for s in stats {
        writeln!(w, "{},{},{:?},{:?}", s.epoch, s.steps, s.mean_loss, s.median_loss)?;
    }
    w.flush()
}

/// DDPM ancestral sampling with the predicted clean chunk clipped to the
/// action range. Returns the raw `chunk x ACTION_DIM` values.
pub fn sample_raw(
    model: &PolicyModel,
    window: &[Observation],
    instr: InstructionId,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, PolicyError> {
    sample_raw_scaled(model, window, instr, sched, 1.0, rng)
}

/// Ancestral sampling with the per-step posterior noise multiplied by
/// `noise_scale`; 1 is plain DDPM, 0 follows the posterior mean.
pub fn sample_raw_scaled(
    model: &PolicyModel,
    window: &[Observation],
    instr: InstructionId,
    sched: &NoiseSchedule,
    noise_scale: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, PolicyError> {
    let feats = window_features(window);
    let enc = encode_history(model, &feats)?;
    let motion = model.motion_feature(instr)?;
    let n = model.dims.chunk_len();
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for k in (0..sched.steps()).rev() {
        let eps = denoise(model, &enc.feature, motion, &x, k).y;
        let ab = sched.alpha_bar[k];
        let ab_prev = if k == 0 { 1.0 } else { sched.alpha_bar[k - 1] };
        let beta = sched.beta[k];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = sched.alpha[k].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = noise_scale * ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt();
        for i in 0..n {
            let x0 = ((x[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt()).clamp(-1.0, 1.0);
            let mean = c0 * x0 + ct * x[i];
            x[i] = if k > 0 && sigma > 0.0 { mean + sigma * rng.sample::<f64, _>(StandardNormal) } else { mean };
        }
    }
    Ok(x)
}

pub fn chunk_to_actions(raw: &[f64]) -> Vec<Action> {
    raw.chunks_exact(ACTION_DIM)
        .map(|r| Action {
            delta_pos: [r[0].clamp(-1.0, 1.0), r[1].clamp(-1.0, 1.0), r[2].clamp(-1.0, 1.0)],
            gripper_cmd: if r[3] > 0.0 { GripperCmd::Close } else { GripperCmd::Open },
        })
        .collect()
}

pub fn sample_chunk(
    model: &PolicyModel,
    window: &[Observation],
    instr: InstructionId,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<Action>, PolicyError> {
    Ok(chunk_to_actions(&sample_raw(model, window, instr, sched, rng)?))
}

/// Training examples from every step of every trajectory: the padded
/// feature window, the instruction labelling the next `chunk` actions, and
/// those actions with the gripper encoded as +1 closed / -1 open.
pub fn build_examples(
    trajs: &[Trajectory],
    cfg: &AnnotationConfig,
    vocab: &Vocabulary,
    dims: &PolicyDims,
) -> Result<Vec<TrainExample>, PolicyError> {
    let mut out = Vec::new();
    for traj in trajs {
        let feats: Vec<[f64; OBS_FEATURES]> = traj.steps.iter().map(|s| observation_features(&s.obs)).collect();
        let mut grip_after = Vec::with_capacity(traj.steps.len());
        let mut g = GripperState::Open;
        for s in &traj.steps {
            g = match s.act.gripper_cmd {
                GripperCmd::Open => GripperState::Open,
                GripperCmd::Close => GripperState::Closed,
                GripperCmd::Hold => g,
            };
            grip_after.push(g);
        }
        for t in 0..traj.steps.len() {
            let mut features = Vec::with_capacity(dims.history * OBS_FEATURES);
            for j in 0..dims.history {
                let idx = (t + j + 1).saturating_sub(dims.history);
                features.extend_from_slice(&feats[idx]);
            }
            let end = (t + dims.chunk).min(traj.steps.len());
            let acts: Vec<&Action> = traj.steps[t..end].iter().map(|s| &s.act).collect();
            let before = if t == 0 { GripperState::Open } else { grip_after[t - 1] };
            let (_, instr) = label_actions(&acts, t, before, cfg, vocab)?;
            let mut chunk = Vec::with_capacity(dims.chunk_len());
            for j in 0..dims.chunk {
                let i = (t + j).min(traj.steps.len() - 1);
                let dp = if t + j < traj.steps.len() { traj.steps[i].act.delta_pos } else { [0.0; 3] };
                let grip = if grip_after[i] == GripperState::Closed { 1.0 } else { -1.0 };
                chunk.extend_from_slice(&[dp[0], dp[1], dp[2], grip]);
            }
            out.push(TrainExample { features, instr, chunk });
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    dims: PolicyDims,
    features: usize,
    motion_dim: usize,
    vocab_id: String,
    vocab_len: usize,
    trainable_motion: bool,
    motion_seed: u64,
    seed: u64,
    schedule_steps: usize,
    beta: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "motionloop-policy-v1";

fn write_tensor(w: &mut impl Write, name: &str, values: &[f64]) -> std::io::Result<()> {
    write!(w, "{name}")?;
    for v in values {
        write!(w, " {v:?}")?;
    }
    writeln!(w)
}

pub fn save_checkpoint(model: &PolicyModel, sched: &NoiseSchedule, path: impl AsRef<Path>) -> Result<(), PolicyError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, sched, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_checkpoint(model: &PolicyModel, sched: &NoiseSchedule, mut w: impl Write) -> Result<(), PolicyError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        dims: model.dims,
        features: OBS_FEATURES,
        motion_dim: model.motion.table.dim,
        vocab_id: model.motion.table.vocab_id.clone(),
        vocab_len: model.motion.table.rows(),
        trainable_motion: model.motion.trainable,
        motion_seed: model.motion.table.rng_seed,
        seed: model.seed,
        schedule_steps: sched.steps(),
        beta: sched.beta.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for (name, layer) in LAYER_NAMES.iter().zip(model.layers()) {
        write_tensor(&mut w, &format!("{name}.w"), &layer.w)?;
        write_tensor(&mut w, &format!("{name}.b"), &layer.b)?;
    }
    write_tensor(&mut w, "motion.table", &model.motion.table.entries)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PolicyModel, NoiseSchedule), PolicyError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

pub fn read_checkpoint(r: impl BufRead) -> Result<(PolicyModel, NoiseSchedule), PolicyError> {
    let mut lines = r.lines();
    let header_line = lines.next().ok_or_else(|| PolicyError::Checkpoint("empty file".into()))??;
    let header: CheckpointHeader =
        serde_json::from_str(&header_line).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.features != OBS_FEATURES {
        return Err(PolicyError::Checkpoint(format!("unsupported format {}", header.format)));
    }
    let mut tensors = BTreeMap::new();
    for line in lines {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(name) = parts.next() else { continue };
        let values: Result<Vec<f64>, _> = parts.map(str::parse).collect();
        let values = values.map_err(|e| PolicyError::Checkpoint(format!("{name}: {e}")))?;
        tensors.insert(name.to_string(), values);
    }
    let table = MotionCodebook {
        vocab_id: header.vocab_id.clone(),
        dim: header.motion_dim,
        rng_seed: header.motion_seed,
        entries: vec![0.0; header.motion_dim * header.vocab_len],
    };
    let motion = MotionConditioning { table, trainable: header.trainable_motion };
    let mut model = PolicyModel::new(header.dims, motion, header.seed)?;
    let mut take = |name: &str, dst: &mut Vec<f64>| -> Result<(), PolicyError> {
        let v = tensors.remove(name).ok_or_else(|| PolicyError::Checkpoint(format!("missing tensor {name}")))?;
        if v.len() != dst.len() {
            return Err(PolicyError::Checkpoint(format!("{name}: {} values, expected {}", v.len(), dst.len())));
        }
        *dst = v;
        Ok(())
    };
    for (name, layer) in LAYER_NAMES.iter().zip(model.layers_mut()) {
        take(&format!("{name}.w"), &mut layer.w)?;
        take(&format!("{name}.b"), &mut layer.b)?;
    }
    take("motion.table", &mut model.motion.table.entries)?;
    let sched = schedule_from_betas(header.beta)?;
    if sched.steps() != header.schedule_steps {
        return Err(PolicyError::Checkpoint("schedule length mismatch".into()));
    }
    Ok((model, sched))
}

/// Trained policy behind the control loop's chunk interface.
#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    pub model: Arc<PolicyModel>,
    pub sched: Arc<NoiseSchedule>,
    pub noise_scale: f64,
}

impl DiffusionPolicy {
    pub fn new(model: Arc<PolicyModel>, sched: Arc<NoiseSchedule>) -> Self {
        DiffusionPolicy { model, sched, noise_scale: 1.0 }
    }

    pub fn with_noise_scale(mut self, s: f64) -> Self {
        self.noise_scale = s;
        self
    }
}

impl ChunkPolicy for DiffusionPolicy {
    fn act(
        &mut self,
        window: &[Observation],
        _task: &str,
        instr: InstructionId,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Action>, ControlError> {
        if window.len() != self.model.dims.history {
            return Err(ControlError::Policy(format!(
                "window of {} observations, model expects {}",
                window.len(),
                self.model.dims.history
            )));
        }
        sample_raw_scaled(&self.model, window, instr, &self.sched, self.noise_scale, rng)
            .map(|raw| chunk_to_actions(&raw))
            .map_err(|e| ControlError::Policy(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{build_vocabulary, VocabMode};
    use crate::codebook::NgramEmbedder;

    fn vocab() -> Vocabulary {
        build_vocabulary(&AnnotationConfig::default(), VocabMode::Combined).unwrap()
    }

    fn obs(x: f64) -> Observation {
        let mut o = Observation {
            eef_pos: [x, 0.01, 0.1],
            gripper_width: 1.0,
            object_poses: Default::default(),
            task_phase_hint: None,
        };
        o.object_poses.insert(CUBE.into(), [0.05, -0.02, 0.02]);
        o
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar, vec![0.5]);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
        assert!(make_schedule(5, 0.2, 0.1).is_err());
        let d = NoiseSchedule::default_for(50).unwrap();
        assert!(d.alpha_bar[49] < 1e-3);
    }

    #[test]
    fn diffuse_closed_form() {
        let s = schedule_from_betas(vec![0.75]).unwrap();
        let out = forward_diffuse(&[0.0; 16], 0, &[1.0; 16], &s).unwrap();
        assert!(out.iter().all(|v| (v - 0.75f64.sqrt()).abs() < 1e-12));
        assert!(forward_diffuse(&[0.0; 3], 0, &[1.0; 4], &s).is_err());
    }

    #[test]
    fn identical_history_gives_single_step_value() {
        let v = vocab();
        let m = PolicyModel::new(PolicyDims::default(), MotionConditioning::learned(&v, 32, 1).unwrap(), 3).unwrap();
        let window = vec![obs(0.02); 5];
        let enc = encode_history(&m, &window_features(&window)).unwrap();
        let single = m.value.forward(&m.embed.forward(&observation_features(&window[0])));
        for (a, b) in enc.feature.iter().zip(&single) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((enc.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_params_predict_zero() {
        let v = vocab();
        let mut m =
            PolicyModel::new(PolicyDims::default(), MotionConditioning::learned(&v, 32, 1).unwrap(), 3).unwrap();
        m.zero_params();
        let y = predict_noise(&m, &[0.3; 64], m.motion_feature(InstructionId(2)).unwrap(), &[0.5; 16], 7).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn motion_feature_changes_prediction() {
        let v = vocab();
        let m = PolicyModel::new(PolicyDims::default(), MotionConditioning::learned(&v, 32, 1).unwrap(), 3).unwrap();
        let a = predict_noise(&m, &[0.1; 64], m.motion_feature(InstructionId(0)).unwrap(), &[0.2; 16], 4).unwrap();
        let b = predict_noise(&m, &[0.1; 64], m.motion_feature(InstructionId(1)).unwrap(), &[0.2; 16], 4).unwrap();
        let a2 = predict_noise(&m, &[0.1; 64], m.motion_feature(InstructionId(0)).unwrap(), &[0.2; 16], 4).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn sampling_is_seeded_and_shaped() {
        let v = vocab();
        let m = PolicyModel::new(PolicyDims::default(), MotionConditioning::frozen(&v, &NgramEmbedder::default()), 3)
            .unwrap();
        let s = NoiseSchedule::default_for(10).unwrap();
        let w = vec![obs(0.0); 5];
        let a = sample_chunk(&m, &w, InstructionId(4), &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_chunk(&m, &w, InstructionId(4), &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|x| x.delta_pos.iter().all(|d| d.abs() <= 1.0)));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let v = vocab();
        let m = PolicyModel::new(PolicyDims::default(), MotionConditioning::learned(&v, 32, 1).unwrap(), 9).unwrap();
        let s = NoiseSchedule::default_for(50).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &s, &mut buf).unwrap();
        let (m2, s2) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(m, m2);
        assert_eq!(s, s2);
    }
}
