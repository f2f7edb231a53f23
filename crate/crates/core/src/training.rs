//! Shard ingestion, batch assembly, the optimization step and the epoch loop
//! with checkpointing and resume.
//!
//! All randomness during training (data order, caption choice) is derived
//! from `(seed, epoch, index)` rather than drawn from a running generator, so
//! a run resumed from any checkpoint replays the exact same batches.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{build_cost_matrix, hungarian, Assignment, MatchWeights};
use crate::geometry::NormBox;
use crate::image::{load_rgb, ImageTensor};
use crate::model::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, GrainModel, ModelConfig, ModelError, Mode, OptimizerState,
    ParamStore, Session,
};
use crate::objectives::{box_loss_graph, info_nce_graph, total_loss, BoxLossKind, LossBreakdown, LossFlags};
use crate::scalar::Scalar;
use crate::shard::{image_path, read_meta, read_records, AnnotationRecord, ShardError};
use crate::tensor::{Mat, Var};
use crate::tokenizer::{Overflow, TokenIds, Tokenizer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at step {step} (batch {ids:?})")]
    NonFiniteLoss { step: usize, ids: Vec<String> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Warmup length; `None` means `warmup_fraction` of all steps.
    pub warmup_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub caption_swap_prob: f64,
    pub use_rd_loss: bool,
    pub use_box_loss: bool,
    pub use_mllm_caption: bool,
    pub box_loss: BoxLossKind,
    pub match_l1_weight: f64,
    pub match_giou_weight: f64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 35,
            batch_size: 8,
            peak_lr: 5e-4,
            warmup_steps: None,
            warmup_fraction: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            grad_clip: Some(1.0),
            seed: 0,
            caption_swap_prob: 0.5,
            use_rd_loss: true,
            use_box_loss: true,
            use_mllm_caption: true,
            box_loss: BoxLossKind::Giou,
            match_l1_weight: 1.0,
            match_giou_weight: 1.0,
            checkpoint_every: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn tiny() -> Self {
        Self { model: ModelConfig::tiny(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.caption_swap_prob) {
            return bad("caption_swap_prob must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1]");
        }
        if !(self.peak_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("peak_lr must be positive and weight_decay nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.match_l1_weight < 0.0 || self.match_giou_weight < 0.0 {
            return bad("matching weights must be nonnegative");
        }
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn flags(&self) -> LossFlags {
        LossFlags { use_box_loss: self.use_box_loss, use_rd_loss: self.use_rd_loss, box_kind: self.box_loss }
    }

    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * total_steps as f64).round() as usize)
            .min(total_steps)
    }
}

/// Linear warmup to `peak_lr` at step `warmup`, then cosine decay reaching 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_for(total_steps);
    let peak = config.peak_lr;
    if step < warmup {
        return peak * (step + 1) as f64 / (warmup + 1) as f64;
    }
    if total_steps <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total_steps - warmup) as f64).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Generator for one `(purpose, a, b)` slot of a seeded run.
pub fn derived_rng(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0xA076_1D64_78BD_642F));
    r.set_stream(a.wrapping_mul(0x1_0000_0001) ^ b);
    r
}

const ORDER_STREAM: u64 = 1;
const CAPTION_STREAM: u64 = 2;

/// Original caption with probability `1 - caption_swap_prob`, MLLM caption otherwise.
pub fn choose_caption<'r>(record: &'r AnnotationRecord, config: &TrainConfig, rng: &mut impl Rng) -> &'r str {
    let coin: f64 = rng.gen();
    if config.use_mllm_caption && coin < config.caption_swap_prob {
        &record.mllm_caption
    } else {
        &record.original_caption
    }
}

/// A record with its decoded, model-sized image.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub record: AnnotationRecord,
    pub image: ImageTensor<T>,
}

/// Reads shards and decodes their images; unreadable images are skipped with a warning.
pub fn load_samples<T: Scalar>(shard_paths: &[PathBuf], image_size: usize) -> Result<Vec<TrainSample<T>>, TrainError> {
    let mut out = Vec::new();
    for shard in shard_paths {
        let meta = read_meta(shard)?;
        for record in read_records(shard)? {
            let Some(p) = image_path(shard, &meta, &record.image_id) else {
                warn!("{}: no image path in {}; skipped", record.image_id, shard.display());
                continue;
            };
            match load_rgb(&p) {
                Ok(img) => out.push(TrainSample { image: ImageTensor::from_rgb(&img, image_size), record }),
                Err(e) => warn!("{}: corrupt image {} ({e}); skipped", record.image_id, p.display()),
            }
        }
    }
    Ok(out)
}

/// Per-step training unit.
#[derive(Debug, Clone)]
pub struct GroundedBatch<T> {
    pub ids: Vec<String>,
    pub images: Vec<ImageTensor<T>>,
    pub captions: Vec<TokenIds>,
    /// Per image: (description tokens, ground-truth box), at most `n_q` entries.
    pub regions: Vec<Vec<(TokenIds, NormBox<f64>)>>,
}

impl<T> GroundedBatch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn box_counts(&self) -> Vec<usize> {
        self.regions.iter().map(Vec::len).collect()
    }
}

/// Tokenizes captions and localized descriptions; keeps the `n_q`
/// highest-confidence boxes of each record.
pub fn assemble_batch<T: Scalar>(
    samples: &[&TrainSample<T>],
    config: &TrainConfig,
    tokenizer: &Tokenizer,
    rngs: &mut [ChaCha8Rng],
) -> GroundedBatch<T> {
    assert_eq!(samples.len(), rngs.len(), "one generator per sample");
    let n_q = config.model.n_region_queries;
    let mut batch = GroundedBatch { ids: vec![], images: vec![], captions: vec![], regions: vec![] };
    for (s, rng) in samples.iter().zip(rngs.iter_mut()) {
        let rec = &s.record;
        let caption = choose_caption(rec, config, rng);
        let mut boxes: Vec<_> = rec.boxes.iter().filter(|b| b.description_index < rec.descriptions.len()).collect();
        boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        if boxes.len() > n_q {
            warn!("{}: {} boxes exceed {n_q} queries; keeping the most confident", rec.image_id, boxes.len());
            boxes.truncate(n_q);
        }
        let regions = boxes
            .iter()
            .map(|b| {
                let ids = tokenizer
                    .encode(&rec.descriptions[b.description_index], Overflow::Truncate)
                    .expect("truncate mode cannot overflow");
                (ids, b.bbox)
            })
            .collect();
        batch.ids.push(rec.image_id.clone());
        batch.images.push(s.image.clone());
        batch.captions.push(tokenizer.encode(caption, Overflow::Truncate).expect("truncate mode cannot overflow"));
        batch.regions.push(regions);
    }
    batch
}

/// Graph handles of the three losses of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_ic: Var,
    pub l_box: Option<Var>,
    pub l_rd: Option<Var>,
    pub total: Var,
}

/// Builds every enabled loss for `batch` in session `s`.
///
/// Matching runs on the current predicted boxes unless `fixed` supplies the
/// assignments (one per image). Returns the assignments used.
pub fn build_losses<T: Scalar>(
    model: &GrainModel<T>,
    s: &mut Session<'_, T>,
    batch: &GroundedBatch<T>,
    config: &TrainConfig,
    fixed: Option<&[Assignment<f64>]>,
) -> Result<(LossVars, Vec<Assignment<f64>>), TrainError> {
    let flags = config.flags();
    // repeated texts in a batch share one encoder pass
    let mut text_cache: HashMap<Vec<u32>, Var> = HashMap::new();
    let mut encode = |s: &mut Session<'_, T>, ids: &TokenIds| -> Result<Var, ModelError> {
        if let Some(&v) = text_cache.get(&ids.ids) {
            return Ok(v);
        }
        let v = model.encode_text(s, &ids.ids)?;
        text_cache.insert(ids.ids.clone(), v);
        Ok(v)
    };

    let mut image_rows = Vec::with_capacity(batch.len());
    let mut caption_rows = Vec::with_capacity(batch.len());
    let mut matched_boxes = Vec::new();
    let mut matched_regions = Vec::new();
    let mut gt_rows = Vec::new();
    let mut desc_rows = Vec::new();
    let mut assignments = Vec::with_capacity(batch.len());
    let need_match = flags.use_box_loss || flags.use_rd_loss;
    let weights = MatchWeights { l1: config.match_l1_weight, giou: config.match_giou_weight };

    for i in 0..batch.len() {
        let v = model.forward_image(s, &batch.images[i], Mode::Train)?;
        image_rows.push(v.image_embed);
        caption_rows.push(encode(s, &batch.captions[i])?);
        let regions = &batch.regions[i];
        if !need_match || regions.is_empty() {
            assignments.push(Assignment { pairs: vec![], total_cost: 0.0 });
            continue;
        }
        let boxes = v.boxes.expect("train mode predicts boxes");
        let a = match fixed {
            Some(f) => f[i].clone(),
            None => {
                let pv = s.graph.value(boxes);
                let pred: Vec<NormBox<f64>> = (0..pv.rows())
                    .map(|r| NormBox::new_unchecked(pv.get(r, 0).f64(), pv.get(r, 1).f64(), pv.get(r, 2).f64(), pv.get(r, 3).f64()))
                    .collect();
                let gt: Vec<NormBox<f64>> = regions.iter().map(|(_, b)| *b).collect();
                let cost = build_cost_matrix(&gt, &pred, weights)
                    .map_err(|e| TrainError::Data(format!("{}: {e}", batch.ids[i])))?;
                hungarian(&cost)
            }
        };
        let queries: Vec<usize> = a.pairs.iter().map(|&(_, q)| q).collect();
        if flags.use_box_loss {
            matched_boxes.push(s.graph.gather_rows(boxes, &queries));
            for &(g, _) in &a.pairs {
                gt_rows.push(regions[g].1.as_array().map(T::of).to_vec());
            }
        }
        if flags.use_rd_loss {
            matched_regions.push(s.graph.gather_rows(v.region_embeds, &queries));
            for &(g, _) in &a.pairs {
                desc_rows.push(encode(s, &regions[g].0)?);
            }
        }
        assignments.push(a);
    }

    let scale = model.logit_scale(s);
    let images = s.graph.concat_rows(&image_rows);
    let captions = s.graph.concat_rows(&caption_rows);
    let l_ic = info_nce_graph(&mut s.graph, images, captions, scale);
    let mut total = l_ic;
    let l_box = if flags.use_box_loss && !gt_rows.is_empty() {
        let pred = s.graph.concat_rows(&matched_boxes);
        let l = box_loss_graph(&mut s.graph, pred, &Mat::from_rows(&gt_rows), flags.box_kind);
        total = s.graph.add(total, l);
        Some(l)
    } else {
        None
    };
    let l_rd = if flags.use_rd_loss && !desc_rows.is_empty() {
        let regions = s.graph.concat_rows(&matched_regions);
        let descs = s.graph.concat_rows(&desc_rows);
        let l = info_nce_graph(&mut s.graph, regions, descs, scale);
        total = s.graph.add(total, l);
        Some(l)
    } else {
        None
    };
    Ok((LossVars { l_ic, l_box, l_rd, total }, assignments))
}

/// Loss values of a built graph.
pub fn breakdown<T: Scalar>(s: &Session<'_, T>, v: &LossVars, flags: LossFlags) -> LossBreakdown {
    let val = |x: Option<Var>| x.map_or(0.0, |x| s.graph.value(x).item().f64());
    total_loss(val(Some(v.l_ic)), val(v.l_box), val(v.l_rd), flags)
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps, weight_decay: c.weight_decay }
    }

    pub fn init_state<T: Scalar>(params: &ParamStore<T>) -> OptimizerState<T> {
        let zeros = || params.iter().map(|(_, _, p)| Mat::zeros(p.rows(), p.cols())).collect();
        OptimizerState { step: 0, m: zeros(), v: zeros() }
    }

    /// One update; `decay[i]` selects parameters that receive weight decay.
    pub fn update<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        grads: &[Mat<T>],
        state: &mut OptimizerState<T>,
        lr: f64,
        decay: &[bool],
    ) {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (i, p) in params.values_mut().enumerate() {
            let g = grads[i].data();
            let m = state.m[i].data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = b1 * *m + one_b1 * g;
            }
            let v = state.v[i].data_mut();
            for (v, &g) in v.iter_mut().zip(g) {
                *v = b2 * *v + one_b2 * g * g;
            }
            let shrink = if decay[i] { T::of(1.0 - lr * self.weight_decay) } else { T::one() };
            let (m, v) = (state.m[i].data(), state.v[i].data());
            for ((x, &m), &v) in p.data_mut().iter_mut().zip(m).zip(v) {
                *x = *x * shrink - step_size * m / ((v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Weight decay applies to linear weight matrices only.
pub fn decay_mask<T: Scalar>(params: &ParamStore<T>) -> Vec<bool> {
    params.iter().map(|(_, name, _)| name.ends_with(".w")).collect()
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Mat<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sq_norm().f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

/// Forward, backward and one optimizer update. `step` is 0-based.
pub fn train_step<T: Scalar>(
    model: &mut GrainModel<T>,
    batch: &GroundedBatch<T>,
    state: &mut OptimizerState<T>,
    config: &TrainConfig,
    step: usize,
    total_steps: usize,
) -> Result<LossBreakdown, TrainError> {
    let (losses, mut grads) = {
        let mut s = Session::train(model.params());
        let (vars, _) = build_losses(model, &mut s, batch, config, None)?;
        let losses = breakdown(&s, &vars, config.flags());
        if !losses.is_finite() {
            error!("non-finite loss at step {step}: {losses:?}, batch {:?}", batch.ids);
            return Err(TrainError::NonFiniteLoss { step, ids: batch.ids.clone() });
        }
        (losses, s.param_grads(vars.total))
    };
    if let Some(c) = config.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    let lr = lr_at(step, total_steps, config);
    let decay = decay_mask(model.params());
    AdamW::from_config(config).update(model.params_mut(), &grads, state, lr, &decay);
    Ok(losses)
}

/// Step order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, ORDER_STREAM, epoch as u64, 0));
    order
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Batch for global step `step` (0-based).
pub fn batch_for_step<T: Scalar>(
    samples: &[TrainSample<T>],
    config: &TrainConfig,
    tokenizer: &Tokenizer,
    step: usize,
) -> GroundedBatch<T> {
    let spe = steps_per_epoch(samples.len(), config.batch_size);
    let (epoch, pos) = (step / spe, step % spe);
    let order = epoch_order(samples.len(), config.seed, epoch);
    let idx = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(order.len())];
    let chosen: Vec<&TrainSample<T>> = idx.iter().map(|&i| &samples[i]).collect();
    let mut rngs: Vec<ChaCha8Rng> = idx.iter().map(|&i| derived_rng(config.seed, CAPTION_STREAM, epoch as u64, i as u64)).collect();
    assemble_batch(&chosen, config, tokenizer, &mut rngs)
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogEntry {
    /// 1-based count of completed steps.
    pub step: usize,
    pub l_ic: f64,
    pub l_box: f64,
    pub l_rd: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Continue from the newest checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many completed steps (as if interrupted), saving a checkpoint.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub checkpoint: PathBuf,
    pub steps: usize,
    pub total_steps: usize,
    pub losses: Vec<LossLogEntry>,
    pub digest: String,
    pub finished: bool,
}

const LATEST: &str = "latest";
const LOSS_LOG: &str = "loss_log.jsonl";

fn io<T>(p: &Path, r: std::io::Result<T>) -> Result<T, TrainError> {
    r.map_err(|e| TrainError::Io(p.to_path_buf(), e))
}

/// Trains on the given shards, writing checkpoints and `loss_log.jsonl` to `out_dir`.
pub fn fit<T: Scalar>(
    shard_paths: &[PathBuf],
    config: &TrainConfig,
    out_dir: &Path,
    opts: &FitOptions,
) -> Result<FitReport, TrainError> {
    config.validate()?;
    let tokenizer = Tokenizer::bundled();
    if config.model.vocab_size != tokenizer.vocab_size() {
        return Err(TrainError::Config(format!(
            "model vocab_size {} differs from tokenizer vocabulary {}",
            config.model.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let samples = load_samples::<T>(shard_paths, config.model.image_size)?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training records in the given shards".into()));
    }
    fit_samples(&samples, config, out_dir, opts)
}

/// [`fit`] over already-decoded samples.
pub fn fit_samples<T: Scalar>(
    samples: &[TrainSample<T>],
    config: &TrainConfig,
    out_dir: &Path,
    opts: &FitOptions,
) -> Result<FitReport, TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training records".into()));
    }
    let tokenizer = Tokenizer::bundled();
    io(out_dir, fs::create_dir_all(out_dir))?;
    let spe = steps_per_epoch(samples.len(), config.batch_size);
    let total_steps = config.epochs * spe;

    let (mut model, mut state, start) = match latest_checkpoint(out_dir).filter(|_| opts.resume) {
        Some(path) => {
            let ck = load_checkpoint::<T>(&path, Some(tokenizer.identifier()))?;
            let saved: TrainConfig = serde_json::from_value(ck.extra["train_config"].clone())
                .map_err(|e| TrainError::Config(format!("checkpoint lacks a train config: {e}")))?;
            if &saved != config {
                return Err(TrainError::Config("resume requested with a different training config".into()));
            }
            let state = ck.optimizer.ok_or_else(|| TrainError::Config("checkpoint lacks optimizer state".into()))?;
            info!("resuming from {} at step {}", path.display(), ck.step);
            (ck.model, state, ck.step as usize)
        }
        None => {
            let model = GrainModel::<T>::new(config.model.clone(), config.seed)?;
            let state = AdamW::init_state(model.params());
            (model, state, 0)
        }
    };

    let log_path = out_dir.join(LOSS_LOG);
    let mut losses: Vec<LossLogEntry> = if start > 0 {
        read_loss_log(&log_path)?.into_iter().filter(|e| e.step <= start).collect()
    } else {
        Vec::new()
    };
    let mut log = String::new();
    for e in &losses {
        log.push_str(&serde_json::to_string(e).expect("serializes"));
        log.push('\n');
    }
    io(&log_path, fs::write(&log_path, &log))?;
    let mut log_file = io(&log_path, fs::OpenOptions::new().append(true).open(&log_path))?;

    let stop = opts.stop_after.unwrap_or(total_steps).min(total_steps);
    let mut step = start;
    let mut last_ckpt = None;
    while step < stop {
        let batch = batch_for_step(samples, config, tokenizer, step);
        let lb = match train_step(&mut model, &batch, &mut state, config, step, total_steps) {
            Ok(lb) => lb,
            Err(e @ TrainError::NonFiniteLoss { .. }) => {
                let dump = out_dir.join("nonfinite_batch.json");
                let _ = fs::write(&dump, serde_json::to_string(&batch.ids).unwrap_or_default());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let entry = LossLogEntry {
            step: step + 1,
            l_ic: lb.l_ic,
            l_box: lb.l_box,
            l_rd: lb.l_rd,
            l_total: lb.l_total,
            lr: lr_at(step, total_steps, config),
        };
        io(&log_path, writeln!(log_file, "{}", serde_json::to_string(&entry).expect("serializes")))?;
        info!("step {} / {total_steps}: l_total {:.5}", entry.step, entry.l_total);
        losses.push(entry);
        step += 1;
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < stop {
            last_ckpt = Some(write_checkpoint(out_dir, &format!("step-{step:07}.ckpt"), &model, &state, step, config)?);
        }
    }
    let finished = step >= total_steps;
    let name = if finished { "final.ckpt".to_string() } else { format!("step-{step:07}.ckpt") };
    let checkpoint = match last_ckpt.filter(|p: &PathBuf| p.ends_with(&name)) {
        Some(p) => p,
        None => write_checkpoint(out_dir, &name, &model, &state, step, config)?,
    };
    Ok(FitReport { checkpoint, steps: step, total_steps, losses, digest: model.params().digest(), finished })
}

fn write_checkpoint<T: Scalar>(
    out_dir: &Path,
    name: &str,
    model: &GrainModel<T>,
    state: &OptimizerState<T>,
    step: usize,
    config: &TrainConfig,
) -> Result<PathBuf, TrainError> {
    let path = out_dir.join(name);
    let ck = Checkpoint {
        model: model.clone(),
        tokenizer_id: Tokenizer::bundled().identifier().to_string(),
        step: step as u64,
        optimizer: Some(state.clone()),
        extra: serde_json::json!({ "train_config": config }),
    };
    save_checkpoint(&path, &ck)?;
    let latest = out_dir.join(LATEST);
    io(&latest, fs::write(&latest, name))?;
    Ok(path)
}

/// Checkpoint named by the `latest` pointer, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let name = fs::read_to_string(out_dir.join(LATEST)).ok()?;
    let p = out_dir.join(name.trim());
    p.exists().then_some(p)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossLogEntry>, TrainError> {
    let text = io(path, fs::read_to_string(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shard::GroundedBox;

    fn rec(n_boxes: usize) -> AnnotationRecord {
        AnnotationRecord {
            image_id: "r".into(),
            original_caption: "orig".into(),
            mllm_caption: "mllm".into(),
            primary_subject: "thing".into(),
            descriptions: (0..n_boxes + 1).map(|i| format!("part {i}")).collect(),
            boxes: (0..n_boxes)
                .map(|i| GroundedBox {
                    description_index: i,
                    bbox: NormBox::new_unchecked(0.5, 0.5, 0.2, 0.2),
                    confidence: 0.3 + 0.1 * i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn caption_choice() {
        let r = rec(0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c0 = TrainConfig { caption_swap_prob: 0.0, ..TrainConfig::tiny() };
        let c1 = TrainConfig { caption_swap_prob: 1.0, ..TrainConfig::tiny() };
        let off = TrainConfig { use_mllm_caption: false, ..c1.clone() };
        for _ in 0..100 {
            assert_eq!(choose_caption(&r, &c0, &mut rng), "orig");
            assert_eq!(choose_caption(&r, &c1, &mut rng), "mllm");
            assert_eq!(choose_caption(&r, &off, &mut rng), "orig");
        }
        let half = TrainConfig::tiny();
        let n = 10_000;
        let hits = (0..n).filter(|_| choose_caption(&r, &half, &mut rng) == "mllm").count();
        assert!((hits as f64 / n as f64 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn schedule() {
        let c = TrainConfig { peak_lr: 1e-3, warmup_steps: Some(10), ..TrainConfig::tiny() };
        let total = 110;
        assert_eq!(lr_at(10, total, &c), 1e-3);
        assert!(lr_at(total, total, &c).abs() < 1e-12);
        assert!((lr_at(60, total, &c) - 5e-4).abs() < 1e-15);
        assert!(lr_at(0, total, &c) > 0.0);
        for s in 0..total {
            assert!(lr_at(s, total, &c) > 0.0);
            if s >= 10 {
                assert!(lr_at(s + 1, total, &c) <= lr_at(s, total, &c));
            } else {
                assert!(lr_at(s + 1, total, &c) > lr_at(s, total, &c));
            }
        }
    }

    fn samples(n: usize, boxes: usize) -> Vec<TrainSample<f64>> {
        (0..n)
            .map(|i| {
                let mut r = rec(boxes);
                r.image_id = format!("s{i}");
                let mut image = ImageTensor::zeros(32, 32);
                for (k, v) in image.data.iter_mut().enumerate() {
                    *v = ((k * (i + 3)) % 17) as f64 / 17.0 - 0.5;
                }
                TrainSample { record: r, image }
            })
            .collect()
    }

    #[test]
    fn batch_truncation() {
        let tok = Tokenizer::bundled();
        let cfg = TrainConfig::tiny();
        for (n, want) in [(3, 3), (6, 4), (0, 0)] {
            let s = samples(1, n);
            let mut rngs = vec![ChaCha8Rng::seed_from_u64(1)];
            let b = assemble_batch(&[&s[0]], &cfg, tok, &mut rngs);
            assert_eq!(b.box_counts(), [want]);
            if n == 6 {
                let conf: Vec<String> = b.regions[0].iter().map(|(ids, _)| tok.decode(&ids.ids)).collect();
                assert_eq!(conf, ["part 5", "part 4", "part 3", "part 2"]);
            }
        }
    }

    #[test]
    fn rd_flag_zeroes_loss_and_its_gradients() {
        let tok = Tokenizer::bundled();
        let s = samples(3, 2);
        let cfg = TrainConfig { use_rd_loss: false, ..TrainConfig::tiny() };
        let model = GrainModel::<f64>::new(cfg.model.clone(), 0).unwrap();
        let batch = batch_for_step(&s, &cfg, tok, 0);
        let mut sess = Session::train(model.params());
        let (v, _) = build_losses(&model, &mut sess, &batch, &cfg, None).unwrap();
        assert!(v.l_rd.is_none());
        let lb = breakdown(&sess, &v, cfg.flags());
        assert_eq!(lb.l_rd, 0.0);
        let grads = sess.param_grads(v.total);
        let id = model.params().id_of("heads.region_proj.w").unwrap();
        assert!(grads[id.0].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adamw_matches_reference() {
        let mut store = ParamStore::default();
        store.add("a.w", Mat::from_vec(1, 2, vec![1.0f64, -2.0]));
        store.add("a.b", Mat::from_vec(1, 1, vec![0.5f64]));
        let opt = AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
        let mut st = AdamW::init_state(&store);
        let g = vec![Mat::from_vec(1, 2, vec![0.1, 0.2]), Mat::from_vec(1, 1, vec![-0.3])];
        opt.update(&mut store, &g, &mut st, 0.01, &[true, false]);
        // first step: m_hat = g, v_hat = g^2, update = sign(g) * lr (up to eps)
        let want = [1.0 * (1.0 - 0.001) - 0.01, -2.0 * (1.0 - 0.001) - 0.01, 0.5 + 0.01];
        let got: Vec<f64> = store.iter().flat_map(|(_, _, m)| m.data().to_vec()).collect();
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn clipping() {
        let mut g = vec![Mat::from_vec(1, 2, vec![3.0f64, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sq_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_data_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = fit_samples::<f64>(&[], &TrainConfig::tiny(), dir.path(), &FitOptions::default());
        assert!(matches!(r, Err(TrainError::Config(_))));
    }
}
