//! SGD training loop with hard/soft bootstrapping and the three-stage
//! curriculum. Stages chain strictly through checkpoints on disk, so a
//! full progressive run and three single-stage CLI runs produce identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{rng_from_state, rng_state, Checkpoint};
use crate::config::checkpoint_kv;
use crate::error::DataError;
use crate::model::{
    forward_chunk, frames_to_tensors, ModelConfig, ModelParams, StageMode,
};
use crate::preprocess::{
    augment_frames, augmented_label, make_chunks, net_input, resize_chw, sample_augment,
    AlignMode, AugmentConfig, AugmentSample, Chunk,
};
use crate::state::TaillightState;
use crate::synth::{Dataset, Split};
use crate::tensor::{Element, Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training diverged: {detail}")]
    Diverged { detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Cross-entropy on every chunk; only the hardest fraction of each
    /// batch contributes gradient.
    Hard,
    /// Soft bootstrap target mixing on every chunk.
    Soft,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Epochs per curriculum stage.
    pub epochs: [usize; 3],
    pub loss: LossKind,
    pub bootstrap_ratio: f64,
    pub soft_beta: f64,
    /// Global gradient-norm ceiling. Infinity disables clipping.
    pub clip_norm: f64,
    /// Chunk stride over each sequence, in frames.
    pub stride: usize,
    pub augment: bool,
    pub align: AlignMode,
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            epochs: [15, 10, 10],
            loss: LossKind::Hard,
            bootstrap_ratio: 0.3,
            soft_beta: 0.8,
            clip_norm: 5.0,
            stride: 4,
            augment: true,
            align: AlignMode::GlobalShift,
            max_shift: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.batch_size == 0 {
            return Err(DataError::invalid("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DataError::invalid("lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DataError::invalid("momentum must be in [0, 1)"));
        }
        if !(self.bootstrap_ratio > 0.0 && self.bootstrap_ratio <= 1.0) {
            return Err(DataError::invalid("bootstrap_ratio must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.soft_beta) {
            return Err(DataError::invalid("soft_beta must be in [0, 1]"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(DataError::invalid("clip_norm must be positive"));
        }
        if self.stride == 0 {
            return Err(DataError::invalid("stride must be at least 1"));
        }
        Ok(())
    }
}

/// One line of metrics.csv.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub stage: usize,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), DataError> {
    let new_file = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DataError::io(path, e))?;
    if new_file {
        writeln!(f, "stage,epoch,split,loss,accuracy").map_err(|e| DataError::io(path, e))?;
    }
    for r in rows {
        writeln!(
            f,
            "{},{},{},{:.6},{:.6}",
            r.stage,
            r.epoch,
            r.split.as_str(),
            r.loss,
            r.accuracy
        )
        .map_err(|e| DataError::io(path, e))?;
    }
    Ok(())
}

/// Loads a split and cuts every sequence into windows at the model input
/// side. Frames are resized once here and kept as u8.
pub fn prepare_split(
    ds: &Dataset,
    split: Split,
    side: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<Chunk>, DataError> {
    let mut out = Vec::new();
    for rec in ds.split(split) {
        let frames = ds.load_frames(rec)?;
        let resized: Vec<Vec<u8>> = frames.iter().map(|f| resize_chw(f, side)).collect();
        out.extend(make_chunks(
            &resized,
            side,
            rec.label,
            &rec.rel_path,
            window,
            stride,
        ));
    }
    Ok(out)
}

/// Augments, aligns, and tensorizes one chunk. Returns the per-frame net
/// inputs and the (possibly flipped) label.
pub fn chunk_tensors<E: Element>(
    chunk: &Chunk,
    sample: &AugmentSample,
    align: AlignMode,
    max_shift: usize,
) -> Result<(Vec<Tensor<E>>, TaillightState), DataError> {
    let frames = augment_frames(&chunk.frames, chunk.side, sample);
    let label = augmented_label(chunk.label, sample);
    let input = net_input(&frames, chunk.side, align, max_shift)?;
    Ok((frames_to_tensors(&input, chunk.side), label))
}

/// Indices of the `ceil(ratio * n)` largest losses (ties broken toward the
/// lower index), returned in ascending index order.
pub fn hardest_indices(losses: &[f64], ratio: f64) -> Vec<usize> {
    let n = losses.len();
    let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        losses[b]
            .total_cmp(&losses[a])
            .then_with(|| a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

#[derive(Clone, Debug)]
pub struct BatchStats {
    /// Objective value of every chunk in the batch, in input order.
    pub losses: Vec<f64>,
    pub correct: usize,
}

/// Forward-and-backward over one batch. Every chunk gets its own graph;
/// gradients of the selected chunks are averaged into one map keyed by
/// parameter name. Returns only names whose group is trainable in `mode`.
pub fn batch_gradients<E: Element>(
    cfg: &ModelConfig,
    params: &ModelParams<E>,
    mode: StageMode,
    inputs: &[(Vec<Tensor<E>>, TaillightState)],
    loss: LossKind,
    bootstrap_ratio: f64,
    soft_beta: f64,
) -> Result<(BTreeMap<String, Vec<f64>>, BatchStats), TrainError> {
    let mut graphs = Vec::with_capacity(inputs.len());
    let mut losses = Vec::with_capacity(inputs.len());
    let mut correct = 0usize;

    for (frames, label) in inputs {
        let mut g = Graph::new();
        let watched = params.watched(&mut g, mode);
        let mut run = || -> Result<_, TensorError> {
            let out = forward_chunk(&mut g, cfg, &watched, frames, mode, false)?;
            let loss_node = match loss {
                LossKind::Hard => g.cross_entropy_logits(&out.logits_last, label.index())?,
                LossKind::Soft => g.soft_bootstrap_loss(
                    &out.logits_last,
                    label.index(),
                    E::from_f64(soft_beta),
                )?,
            };
            Ok((out, loss_node))
        };
        let (out, loss_node) = run().map_err(divergence_or_tensor)?;
        let value = loss_node.item().as_f64();
        if !value.is_finite() {
            return Err(TrainError::Diverged {
                detail: format!("chunk loss is {value}"),
            });
        }
        if out.logits_last.argmax() == label.index() {
            correct += 1;
        }
        losses.push(value);
        graphs.push((g, watched, loss_node));
    }

    let selected = match loss {
        LossKind::Hard => hardest_indices(&losses, bootstrap_ratio),
        LossKind::Soft => (0..inputs.len()).collect(),
    };
    let weight = 1.0 / selected.len() as f64;

    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &i in &selected {
        let (g, watched, loss_node) = &graphs[i];
        let grads = g.backward(loss_node)?;
        for name in params.names() {
            let leaf = watched.get(&name).expect("known name");
            if let Some(grad) = grads.get(&leaf) {
                let slot = acc
                    .entry(name)
                    .or_insert_with(|| vec![0.0; grad.numel()]);
                for (a, v) in slot.iter_mut().zip(grad.data().iter()) {
                    *a += weight * v.as_f64();
                }
            }
        }
    }

    Ok((acc, BatchStats { losses, correct }))
}

fn divergence_or_tensor(e: TensorError) -> TrainError {
    match e {
        TensorError::NonFinite { op } => TrainError::Diverged {
            detail: format!("non-finite values produced by {op}"),
        },
        other => TrainError::Tensor(other),
    }
}

/// Momentum buffers, keyed by parameter name. Buffers appear on first use
/// so a freshly reset state adds no names for frozen groups.
#[derive(Clone, Debug, Default)]
pub struct SgdState<E: Element> {
    pub velocity: BTreeMap<String, Vec<E>>,
}

impl<E: Element> SgdState<E> {
    pub fn new() -> SgdState<E> {
        SgdState {
            velocity: BTreeMap::new(),
        }
    }
}

/// Rescales the whole gradient map so its joint two-norm is at most
/// `max_norm`; gradients at or under the ceiling pass through untouched.
/// Returns the pre-clip norm. Without a normalization layer the loss
/// surface sharpens as logits grow, and a single oversized step near the
/// descent knee throws the run back to chance.
pub fn clip_gradients(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for gi in g.iter_mut() {
                *gi *= scale;
            }
        }
    }
    norm
}

/// v <- momentum * v + g, p <- p - lr * v, applied per parameter that has
/// a gradient. Parameters without one pass through untouched.
pub fn sgd_step<E: Element>(
    params: &ModelParams<E>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut SgdState<E>,
    lr: f64,
    momentum: f64,
) -> ModelParams<E> {
    let lr = E::from_f64(lr);
    let m = E::from_f64(momentum);
    params.map(&mut |name, t| {
        let Some(g) = grads.get(name) else {
            return t.clone();
        };
        let vel = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![E::zero(); g.len()]);
        let mut next = Vec::with_capacity(g.len());
        for ((v, &gi), &p) in vel.iter_mut().zip(g).zip(t.data().iter()) {
            *v = m * *v + E::from_f64(gi);
            next.push(p - lr * *v);
        }
        Tensor::from_vec(t.shape(), next).expect("parameter shape unchanged")
    })
}

/// Mean cross-entropy and accuracy over a chunk set with augmentation off.
/// Reported test loss is plain cross-entropy regardless of the training
/// objective.
pub fn split_metrics<E: Element>(
    cfg: &ModelConfig,
    params: &ModelParams<E>,
    mode: StageMode,
    chunks: &[Chunk],
    align: AlignMode,
    max_shift: usize,
) -> Result<(f64, f64), TrainError> {
    let identity = AugmentSample::identity();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in chunks {
        let (frames, label) = chunk_tensors::<E>(chunk, &identity, align, max_shift)?;
        let mut g = Graph::new();
        let out = forward_chunk(&mut g, cfg, params, &frames, mode, false)
            .map_err(divergence_or_tensor)?;
        let loss = g.cross_entropy_logits(&out.logits_last, label.index())?;
        loss_sum += loss.item().as_f64();
        if out.logits_last.argmax() == label.index() {
            correct += 1;
        }
    }
    let n = chunks.len().max(1) as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Rebuilds parameters from a checkpoint, verifying every tensor exists
/// with the right shape.
pub fn params_from_checkpoint<E: Element>(
    cfg: &ModelConfig,
    ck: &Checkpoint<E>,
) -> Result<ModelParams<E>, DataError> {
    let mut template_rng = ChaCha8Rng::seed_from_u64(0);
    let template: ModelParams<E> = ModelParams::init(cfg, &mut template_rng);
    let mut problem: Option<String> = None;
    let restored = template.map(&mut |name, t| match ck.tensor(name) {
        Some(s) if s.shape() == t.shape() => s.clone(),
        Some(s) => {
            problem.get_or_insert(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                s.shape(),
                t.shape()
            ));
            t.clone()
        }
        None => {
            problem.get_or_insert(format!("tensor {name} missing"));
            t.clone()
        }
    });
    match problem {
        Some(detail) => Err(DataError::Checkpoint { detail }),
        None => Ok(restored),
    }
}

fn require_prior<'a, E: Element>(
    stage: usize,
    prior: Option<&'a Checkpoint<E>>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<Option<&'a Checkpoint<E>>, DataError> {
    if stage == 1 {
        return Ok(None);
    }
    let ck = prior.ok_or_else(|| DataError::Checkpoint {
        detail: format!("stage {stage} requires the stage {} checkpoint", stage - 1),
    })?;
    let tag = ck.config_value("stage").unwrap_or("?");
    if tag != (stage - 1).to_string() {
        return Err(DataError::Checkpoint {
            detail: format!(
                "stage {stage} needs a stage {} checkpoint, found stage {tag}",
                stage - 1
            ),
        });
    }
    // The echo must agree on everything that shapes the model or the RNG
    // stream; a checkpoint from a different run must not chain silently.
    for (k, v) in checkpoint_kv(mcfg, tcfg, stage - 1) {
        if k == "stage" {
            continue;
        }
        match ck.config_value(&k) {
            Some(got) if got == v => {}
            Some(got) => {
                return Err(DataError::Checkpoint {
                    detail: format!("checkpoint config mismatch: {k} is {got}, expected {v}"),
                })
            }
            None => {
                return Err(DataError::Checkpoint {
                    detail: format!("checkpoint config missing key {k}"),
                })
            }
        }
    }
    Ok(Some(ck))
}

/// Runs one curriculum stage and returns its final checkpoint plus one
/// metrics row per epoch and split. Stage 1 starts fresh from the seed;
/// later stages restore parameters and the RNG stream from `prior`, then
/// freshly initialize the groups that first unfreeze at this stage.
pub fn train_stage<E: Element>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    stage: usize,
    prior: Option<&Checkpoint<E>>,
    train_chunks: &[Chunk],
    test_chunks: &[Chunk],
) -> Result<(Checkpoint<E>, Vec<MetricsRow>), TrainError> {
    let mode = StageMode::from_stage(stage)
        .ok_or_else(|| DataError::invalid(format!("stage must be 1..=3, got {stage}")))?;
    mcfg.validate()?;
    tcfg.validate()?;
    let prior = require_prior(stage, prior, mcfg, tcfg)?;

    let (mut params, mut rng) = match prior {
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
            let params = ModelParams::<E>::init(mcfg, &mut rng);
            (params, rng)
        }
        Some(ck) => {
            let mut params = params_from_checkpoint(mcfg, ck)?;
            let mut rng = rng_from_state(ck.rng_seed, ck.rng_word_pos);
            for &group in mode.newly_enabled() {
                params.reinit_group(mcfg, group, &mut rng);
            }
            (params, rng)
        }
    };
    // Momentum does not carry across stage boundaries: the loss surface
    // changes shape when a group unfreezes.
    let mut sgd = SgdState::new();
    let acfg = AugmentConfig::default();
    let mut rows = Vec::new();

    for epoch in 0..tcfg.epochs[stage - 1] {
        let mut order: Vec<usize> = (0..train_chunks.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = if tcfg.augment {
                    sample_augment(&acfg, &mut rng)
                } else {
                    AugmentSample::identity()
                };
                inputs.push(chunk_tensors::<E>(
                    &train_chunks[i],
                    &sample,
                    tcfg.align,
                    tcfg.max_shift,
                )?);
            }
            let (mut grads, stats) = batch_gradients(
                mcfg,
                &params,
                mode,
                &inputs,
                tcfg.loss,
                tcfg.bootstrap_ratio,
                tcfg.soft_beta,
            )?;
            clip_gradients(&mut grads, tcfg.clip_norm);
            params = sgd_step(&params, &grads, &mut sgd, tcfg.lr, tcfg.momentum);
            loss_sum += stats.losses.iter().sum::<f64>();
            correct += stats.correct;
        }

        let n = train_chunks.len().max(1) as f64;
        rows.push(MetricsRow {
            stage,
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        });
        let (test_loss, test_acc) =
            split_metrics(mcfg, &params, mode, test_chunks, tcfg.align, tcfg.max_shift)?;
        rows.push(MetricsRow {
            stage,
            epoch,
            split: Split::Test,
            loss: test_loss,
            accuracy: test_acc,
        });
        log::info!(
            "stage {stage} epoch {epoch}: train loss {:.4} acc {:.3} | test loss {:.4} acc {:.3}",
            loss_sum / n,
            correct as f64 / n,
            test_loss,
            test_acc,
        );
    }

    let mut tensors: Vec<(String, Tensor<E>)> = Vec::new();
    params.visit(&mut |name, t| tensors.push((name.to_string(), t.clone())));
    for (name, vel) in &sgd.velocity {
        let shape = params.get(name).expect("velocity for known name");
        tensors.push((
            format!("momentum.{name}"),
            Tensor::from_vec(shape.shape(), vel.clone()).expect("velocity shape"),
        ));
    }
    let (rng_seed, rng_word_pos) = rng_state(&rng);
    let ck = Checkpoint {
        config: checkpoint_kv(mcfg, tcfg, stage),
        tensors,
        rng_seed,
        rng_word_pos,
    };
    Ok((ck, rows))
}

pub fn stage_checkpoint_path(out_dir: &Path, stage: usize) -> PathBuf {
    out_dir.join(format!("stage{stage}.ckpt"))
}

/// Runs the requested stages in order, chaining each from the previous
/// stage's checkpoint file in `out_dir` and appending to metrics.csv.
pub fn train_stages<E: Element>(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    stages: &[usize],
) -> Result<Vec<MetricsRow>, TrainError> {
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let side = mcfg.backbone.input_side;
    let train_chunks = prepare_split(dataset, Split::Train, side, mcfg.window, tcfg.stride)?;
    let test_chunks = prepare_split(dataset, Split::Test, side, mcfg.window, tcfg.stride)?;
    if train_chunks.is_empty() {
        return Err(DataError::invalid("training split produced no chunks").into());
    }

    let mut all_rows = Vec::new();
    for &stage in stages {
        let prior = if stage == 1 {
            None
        } else {
            Some(Checkpoint::<E>::load(&stage_checkpoint_path(
                out_dir,
                stage - 1,
            ))?)
        };
        let (ck, rows) = train_stage(
            mcfg,
            tcfg,
            stage,
            prior.as_ref(),
            &train_chunks,
            &test_chunks,
        )?;
        ck.save(&stage_checkpoint_path(out_dir, stage))?;
        append_metrics(&out_dir.join("metrics.csv"), &rows)?;
        all_rows.extend(rows);
    }
    Ok(all_rows)
}
