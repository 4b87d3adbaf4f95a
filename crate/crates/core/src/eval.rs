//! Evaluation reports at chunk and video level, plus attention export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::image::write_pgm;
use crate::model::{forward_chunk, ModelConfig, ModelParams, StageMode, NUM_CLASSES};
use crate::preprocess::{AlignMode, AugmentSample, Chunk};
use crate::state::TaillightState;
use crate::tensor::{Element, Graph};
use crate::train::{chunk_tensors, TrainError};
use crate::error::DataError;

/// Confusion counts and per-class accuracy at one granularity.
/// `per_class[c]` is None when class `c` has no examples.
#[derive(Clone, Debug)]
pub struct LevelReport {
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub accuracy: f64,
    pub total: usize,
}

pub fn build_report(pairs: &[(TaillightState, TaillightState)]) -> LevelReport {
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (truth, pred) in pairs {
        confusion[truth.index()][pred.index()] += 1;
    }
    let mut per_class = [None; NUM_CLASSES];
    let mut correct = 0usize;
    for c in 0..NUM_CLASSES {
        let support: usize = confusion[c].iter().sum();
        if support > 0 {
            per_class[c] = Some(confusion[c][c] as f64 / support as f64);
        }
        correct += confusion[c][c];
    }
    let total = pairs.len();
    LevelReport {
        confusion,
        per_class,
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        total,
    }
}

/// Majority vote over chunk predictions; ties resolve to the lowest class
/// index so the vote is deterministic.
pub fn video_vote(preds: &[TaillightState]) -> TaillightState {
    let mut counts = [0usize; NUM_CLASSES];
    for p in preds {
        counts[p.index()] += 1;
    }
    let best = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .expect("eight classes")
        .0;
    TaillightState::from_index(best).expect("index in range")
}

#[derive(Clone, Debug)]
pub struct ChunkRecord {
    pub source: String,
    pub start: usize,
    pub label: TaillightState,
    pub predicted: TaillightState,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub chunk: LevelReport,
    pub video: LevelReport,
    pub mean_loss: f64,
    pub records: Vec<ChunkRecord>,
}

/// Full inference over a chunk set with augmentation off.
pub fn evaluate<E: Element>(
    cfg: &ModelConfig,
    params: &ModelParams<E>,
    mode: StageMode,
    chunks: &[Chunk],
    align: AlignMode,
    max_shift: usize,
) -> Result<Evaluation, TrainError> {
    let identity = AugmentSample::identity();
    let mut records = Vec::with_capacity(chunks.len());
    let mut loss_sum = 0.0;
    for chunk in chunks {
        let (frames, label) = chunk_tensors::<E>(chunk, &identity, align, max_shift)?;
        let mut g = Graph::new();
        let out = forward_chunk(&mut g, cfg, params, &frames, mode, false)?;
        let loss = g.cross_entropy_logits(&out.logits_last, label.index())?;
        let predicted =
            TaillightState::from_index(out.logits_last.argmax()).expect("eight logits");
        loss_sum += loss.item().as_f64();
        records.push(ChunkRecord {
            source: chunk.source.clone(),
            start: chunk.start,
            label,
            predicted,
            loss: loss.item().as_f64(),
        });
    }

    let chunk_pairs: Vec<_> = records.iter().map(|r| (r.label, r.predicted)).collect();
    // Group chunks by their source sequence for the video-level vote.
    let mut by_video: BTreeMap<&str, (TaillightState, Vec<TaillightState>)> = BTreeMap::new();
    for r in &records {
        by_video
            .entry(&r.source)
            .or_insert_with(|| (r.label, Vec::new()))
            .1
            .push(r.predicted);
    }
    let video_pairs: Vec<_> = by_video
        .values()
        .map(|(label, preds)| (*label, video_vote(preds)))
        .collect();

    Ok(Evaluation {
        chunk: build_report(&chunk_pairs),
        video: build_report(&video_pairs),
        mean_loss: loss_sum / chunks.len().max(1) as f64,
        records,
    })
}

/// One CSV per report: a confusion row per true class with its accuracy
/// ("-" when the class has no examples), and a Total row.
pub fn write_report_csv(path: &Path, report: &LevelReport) -> Result<(), DataError> {
    let mut text = String::from("class");
    for s in TaillightState::ALL {
        text.push(',');
        text.push_str(s.code());
    }
    text.push_str(",accuracy\n");
    for (c, row) in report.confusion.iter().enumerate() {
        text.push_str(TaillightState::from_index(c).expect("class index").code());
        for &n in row {
            text.push_str(&format!(",{n}"));
        }
        match report.per_class[c] {
            Some(a) => text.push_str(&format!(",{a:.4}\n")),
            None => text.push_str(",-\n"),
        }
    }
    text.push_str("Total");
    for p in 0..NUM_CLASSES {
        let col: usize = report.confusion.iter().map(|row| row[p]).sum();
        text.push_str(&format!(",{col}"));
    }
    text.push_str(&format!(",{:.4}\n", report.accuracy));
    fs::write(path, text).map_err(|e| DataError::io(path, e))?;
    Ok(())
}

pub fn format_summary(e: &Evaluation) -> String {
    format!(
        "chunks: {} acc {:.4} | videos: {} acc {:.4} | mean loss {:.4}",
        e.chunk.total, e.chunk.accuracy, e.video.total, e.video.accuracy, e.mean_loss
    )
}

/// Renders one attention map as an 8-bit grayscale image, upscaled to
/// `side` with nearest neighbor. Each map is normalized to its own range;
/// a constant map renders mid-gray since it carries no contrast.
fn alpha_to_gray(alpha: &[f64], grid: usize, side: usize) -> Vec<u8> {
    let lo = alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let flat = hi - lo <= 1e-12;
    let mut out = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            let gy = y * grid / side;
            let gx = x * grid / side;
            let v = if flat {
                128
            } else {
                ((alpha[gy * grid + gx] - lo) / (hi - lo) * 255.0).round() as u8
            };
            out[y * side + x] = v;
        }
    }
    out
}

/// Writes, per chunk: a PGM per timestep, the temporal weight matrix, raw
/// spatial weights, and per-step summary stats, plus an index of chunks.
pub fn export_attention<E: Element>(
    cfg: &ModelConfig,
    params: &ModelParams<E>,
    mode: StageMode,
    chunks: &[Chunk],
    align: AlignMode,
    max_shift: usize,
    out_dir: &Path,
) -> Result<(), TrainError> {
    fs::create_dir_all(out_dir).map_err(|e| DataError::io(out_dir, e))?;
    let identity = AugmentSample::identity();
    let mut index = String::from("chunk,source,start,label,predicted\n");
    let side = cfg.backbone.input_side;

    for (i, chunk) in chunks.iter().enumerate() {
        let (frames, label) = chunk_tensors::<E>(chunk, &identity, align, max_shift)?;
        let mut g = Graph::new();
        let out = forward_chunk(&mut g, cfg, params, &frames, mode, true)?;
        let trace = out.trace.expect("trace requested");
        let predicted = TaillightState::from_index(trace.predicted).expect("class index");
        index.push_str(&format!(
            "{i},{},{},{},{predicted}\n",
            chunk.source, chunk.start, label
        ));

        for (t, alpha) in trace.alphas.iter().enumerate() {
            let gray = alpha_to_gray(alpha, trace.grid, side);
            write_pgm(
                &out_dir.join(format!("chunk{i:03}_alpha{t:02}.pgm")),
                side,
                side,
                &gray,
            )?;
        }

        let mut beta = String::new();
        for t in 0..trace.window {
            let row: Vec<String> = (0..trace.window)
                .map(|u| format!("{:.6}", trace.beta[t * trace.window + u]))
                .collect();
            beta.push_str(&row.join(","));
            beta.push('\n');
        }
        let beta_path = out_dir.join(format!("chunk{i:03}_beta.csv"));
        fs::write(&beta_path, beta).map_err(|e| DataError::io(&beta_path, e))?;

        let mut raw = String::new();
        let mut stats = String::from("step,max_weight,argmax_row,argmax_col\n");
        for (t, alpha) in trace.alphas.iter().enumerate() {
            let row: Vec<String> = alpha.iter().map(|v| format!("{v:.8}")).collect();
            raw.push_str(&row.join(","));
            raw.push('\n');
            let (arg, hi) = alpha
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("alpha is non-empty");
            stats.push_str(&format!(
                "{t},{hi:.8},{},{}\n",
                arg / trace.grid,
                arg % trace.grid
            ));
        }
        let raw_path = out_dir.join(format!("chunk{i:03}_alpha_raw.csv"));
        fs::write(&raw_path, raw).map_err(|e| DataError::io(&raw_path, e))?;
        let stats_path = out_dir.join(format!("chunk{i:03}_alpha_stats.csv"));
        fs::write(&stats_path, stats).map_err(|e| DataError::io(&stats_path, e))?;
    }

    let index_path = out_dir.join("index.csv");
    fs::write(&index_path, index).map_err(|e| DataError::io(&index_path, e))?;
    Ok(())
}

/// Per-sequence prediction lines for the infer command.
pub fn format_predictions(e: &Evaluation) -> String {
    let mut by_video: BTreeMap<&str, (TaillightState, Vec<TaillightState>)> = BTreeMap::new();
    for r in &e.records {
        by_video
            .entry(&r.source)
            .or_insert_with(|| (r.label, Vec::new()))
            .1
            .push(r.predicted);
    }
    let mut out = String::from("sequence,label,predicted,chunks\n");
    for (source, (label, preds)) in by_video {
        let vote = video_vote(&preds);
        let marks: Vec<String> = preds.iter().map(|p| p.to_string()).collect();
        out.push_str(&format!("{source},{label},{vote},{}\n", marks.join("|")));
    }
    out
}
