//! From decoded frames to network-ready chunks.
//!
//! Frames are resized to the model's input side, cut into overlapping
//! windows, photometrically augmented (training only), aligned against the
//! previous frame, and turned into the network input: the raw first frame
//! followed by absolute differences of aligned consecutive frames, which
//! makes blink transitions explicit while mostly cancelling static content.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::image::Image;
use crate::state::TaillightState;

pub const CHANNELS: usize = 3;

/// Bilinear resize to `side` x `side`, planar CHW u8.
pub fn resize_chw(img: &Image, side: usize) -> Vec<u8> {
    let (sw, sh) = (img.width(), img.height());
    let src = img.data();
    let mut out = vec![0u8; CHANNELS * side * side];
    let sx_scale = sw as f32 / side as f32;
    let sy_scale = sh as f32 / side as f32;
    for y in 0..side {
        let fy = ((y as f32 + 0.5) * sy_scale - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f32;
        for x in 0..side {
            let fx = ((x as f32 + 0.5) * sx_scale - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f32;
            for c in 0..CHANNELS {
                let p = |px: usize, py: usize| src[(py * sw + px) * CHANNELS + c] as f32;
                let top = p(x0, y0) * (1.0 - wx) + p(x1, y0) * wx;
                let bot = p(x0, y1) * (1.0 - wx) + p(x1, y1) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                out[c * side * side + y * side + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Planar u8 frame to f32 in [0, 1].
pub fn frame_to_f32(frame: &[u8]) -> Vec<f32> {
    frame.iter().map(|&v| v as f32 / 255.0).collect()
}

/// Valid chunk start offsets: every `stride` frames while a full window
/// fits. Empty when the sequence is shorter than the window.
pub fn chunk_starts(num_frames: usize, window: usize, stride: usize) -> Vec<usize> {
    assert!(window >= 2, "window must cover at least two frames");
    assert!(stride >= 1, "stride must be positive");
    if num_frames < window {
        return Vec::new();
    }
    let count = (num_frames - window) / stride + 1;
    (0..count).map(|i| i * stride).collect()
}

/// A window of resized frames with its label and provenance. Frames stay
/// u8 until augmentation so a cached dataset is small.
#[derive(Clone, Debug)]
pub struct Chunk {
    pub side: usize,
    pub frames: Vec<Vec<u8>>,
    pub label: TaillightState,
    /// Sequence identity (manifest path), used for video-level voting.
    pub source: String,
    pub start: usize,
}

pub fn make_chunks(
    frames: &[Vec<u8>],
    side: usize,
    label: TaillightState,
    source: &str,
    window: usize,
    stride: usize,
) -> Vec<Chunk> {
    let starts = chunk_starts(frames.len(), window, stride);
    if starts.is_empty() {
        log::warn!(
            "sequence {source} has {} frames, shorter than window {window}: no chunks",
            frames.len()
        );
    }
    starts
        .into_iter()
        .map(|start| Chunk {
            side,
            frames: frames[start..start + window].to_vec(),
            label,
            source: source.to_string(),
            start,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlignMode {
    Identity,
    GlobalShift,
}

/// Integer translation of `cur` relative to `prev`, found by exhaustive
/// SAD search over [-max_shift, max_shift]^2, each candidate normalized by
/// its overlap area. Candidates are visited small-shift-first and must win
/// strictly, so ties resolve to the smallest |dx|+|dy|, then (dy, dx).
pub fn estimate_shift(
    prev: &[f32],
    cur: &[f32],
    side: usize,
    max_shift: usize,
) -> (isize, isize) {
    let m = max_shift as isize;
    let mut candidates = Vec::with_capacity(((2 * m + 1) * (2 * m + 1)) as usize);
    for dy in -m..=m {
        for dx in -m..=m {
            candidates.push((dx, dy));
        }
    }
    candidates.sort_by_key(|&(dx, dy)| (dx.abs() + dy.abs(), dy, dx));

    let mut best = (0isize, 0isize);
    let mut best_cost = f64::INFINITY;
    for (dx, dy) in candidates {
        let xs = dx.max(0) as usize..(side as isize + dx.min(0)) as usize;
        let ys = dy.max(0) as usize..(side as isize + dy.min(0)) as usize;
        let area = xs.len() * ys.len();
        if area == 0 {
            continue;
        }
        let mut sad = 0.0f64;
        for c in 0..CHANNELS {
            let plane = c * side * side;
            for y in ys.clone() {
                let py = (y as isize - dy) as usize;
                let row = plane + y * side;
                let prow = plane + py * side;
                for x in xs.clone() {
                    let px = (x as isize - dx) as usize;
                    sad += (cur[row + x] - prev[prow + px]).abs() as f64;
                }
            }
        }
        let cost = sad / (CHANNELS * area) as f64;
        if cost < best_cost {
            best_cost = cost;
            best = (dx, dy);
        }
    }
    best
}

/// |cur - warp(prev)| where warp(prev)(x, y) = prev(x - dx, y - dy);
/// positions whose source falls outside the frame yield 0.
fn shifted_abs_diff(prev: &[f32], cur: &[f32], side: usize, shift: (isize, isize)) -> Vec<f32> {
    let (dx, dy) = shift;
    let mut out = vec![0.0f32; CHANNELS * side * side];
    let xs = dx.max(0)..(side as isize + dx.min(0));
    let ys = dy.max(0)..(side as isize + dy.min(0));
    for c in 0..CHANNELS {
        let plane = c * side * side;
        for y in ys.clone() {
            let py = (y - dy) as usize;
            for x in xs.clone() {
                let px = (x - dx) as usize;
                let i = plane + y as usize * side + x as usize;
                out[i] = (cur[i] - prev[plane + py * side + px]).abs();
            }
        }
    }
    out
}

/// Absolute differences of consecutive frames after alignment; output has
/// one frame fewer than the input.
pub fn align_and_diff(
    frames: &[Vec<f32>],
    side: usize,
    mode: AlignMode,
    max_shift: usize,
) -> Result<Vec<Vec<f32>>, DataError> {
    if frames.len() < 2 {
        return Err(DataError::invalid(format!(
            "differencing needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    Ok(frames
        .windows(2)
        .map(|pair| {
            let shift = match mode {
                AlignMode::Identity => (0, 0),
                AlignMode::GlobalShift => estimate_shift(&pair[0], &pair[1], side, max_shift),
            };
            shifted_abs_diff(&pair[0], &pair[1], side, shift)
        })
        .collect())
}

/// The network input for a window: the raw first frame, then the aligned
/// differences. Length equals the window length.
pub fn net_input(
    frames: &[Vec<f32>],
    side: usize,
    mode: AlignMode,
    max_shift: usize,
) -> Result<Vec<Vec<f32>>, DataError> {
    let mut out = Vec::with_capacity(frames.len());
    out.push(frames[0].clone());
    out.extend(align_and_diff(frames, side, mode, max_shift)?);
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub channel_gain: (f32, f32),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: (0.85, 1.15),
            contrast: (0.85, 1.15),
            channel_gain: (0.92, 1.08),
            flip_prob: 0.5,
        }
    }
}

/// One chunk's augmentation draw: a single photometric transform shared by
/// all frames of the chunk, plus an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSample {
    pub brightness: f32,
    pub contrast: f32,
    pub gains: [f32; 3],
    pub flip: bool,
}

impl AugmentSample {
    pub fn identity() -> AugmentSample {
        AugmentSample {
            brightness: 1.0,
            contrast: 1.0,
            gains: [1.0; 3],
            flip: false,
        }
    }
}

pub fn sample_augment(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentSample {
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };
    AugmentSample {
        brightness: draw(rng, cfg.brightness),
        contrast: draw(rng, cfg.contrast),
        gains: [
            draw(rng, cfg.channel_gain),
            draw(rng, cfg.channel_gain),
            draw(rng, cfg.channel_gain),
        ],
        flip: rng.random_bool(cfg.flip_prob),
    }
}

/// Label after augmentation: a horizontal flip swaps the turn-signal sides.
pub fn augmented_label(label: TaillightState, sample: &AugmentSample) -> TaillightState {
    if sample.flip {
        label.flipped()
    } else {
        label
    }
}

fn flip_chw(frame: &mut [f32], side: usize) {
    for c in 0..CHANNELS {
        let plane = c * side * side;
        for y in 0..side {
            frame[plane + y * side..plane + (y + 1) * side].reverse();
        }
    }
}

/// Converts a chunk's frames to f32 and applies one augmentation sample to
/// every frame. Identity parameters reproduce the plain conversion exactly.
pub fn augment_frames(frames: &[Vec<u8>], side: usize, sample: &AugmentSample) -> Vec<Vec<f32>> {
    frames
        .iter()
        .map(|raw| {
            let mut f = frame_to_f32(raw);
            for c in 0..CHANNELS {
                let scale = sample.brightness * sample.gains[c];
                if sample.contrast == 1.0 && scale == 1.0 {
                    continue;
                }
                let plane = &mut f[c * side * side..(c + 1) * side * side];
                for v in plane.iter_mut() {
                    let mut x = *v;
                    if sample.contrast != 1.0 {
                        x = (x - 0.5) * sample.contrast + 0.5;
                    }
                    *v = (x * scale).clamp(0.0, 1.0);
                }
            }
            if sample.flip {
                flip_chw(&mut f, side);
            }
            f
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_frame(side: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..CHANNELS * side * side)
            .map(|_| rng.random_range(0.0..1.0))
            .collect()
    }

    #[test]
    fn identical_frames_difference_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_frame(8, &mut rng);
        let diffs =
            align_and_diff(&[f.clone(), f.clone(), f], 8, AlignMode::GlobalShift, 2).unwrap();
        assert_eq!(diffs.len(), 2);
        for d in diffs {
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_frame_is_rejected() {
        let f = vec![0.0f32; CHANNELS * 4];
        assert!(align_and_diff(&[f], 2, AlignMode::Identity, 0).is_err());
    }

    #[test]
    fn known_two_by_two_difference() {
        // Channel pattern (10, 20; 30, 40) against (12, 18; 30, 40)
        // differences to (2, 2; 0, 0) with identity alignment.
        let a = [10.0f32, 20.0, 30.0, 40.0];
        let b = [12.0f32, 18.0, 30.0, 40.0];
        let mk = |p: &[f32; 4]| -> Vec<f32> { p.repeat(CHANNELS) };
        let diffs = align_and_diff(&[mk(&a), mk(&b)], 2, AlignMode::Identity, 0).unwrap();
        for c in 0..CHANNELS {
            assert_eq!(&diffs[0][c * 4..c * 4 + 4], &[2.0, 2.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn pure_translation_is_recovered_and_cancelled() {
        let side = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prev = rand_frame(side, &mut rng);
        // cur(x, y) = prev(x - 2, y - 1): the scene moved right 2, down 1.
        let (dx, dy) = (2isize, 1isize);
        let mut cur = vec![0.0f32; prev.len()];
        for c in 0..CHANNELS {
            let plane = c * side * side;
            for y in 0..side as isize {
                for x in 0..side as isize {
                    let (sx, sy) = (x - dx, y - dy);
                    let v = if (0..side as isize).contains(&sx)
                        && (0..side as isize).contains(&sy)
                    {
                        prev[plane + (sy * side as isize + sx) as usize]
                    } else {
                        0.3
                    };
                    cur[plane + (y * side as isize + x) as usize] = v;
                }
            }
        }
        assert_eq!(estimate_shift(&prev, &cur, side, 4), (2, 1));
        let diffs = align_and_diff(
            &[prev, cur],
            side,
            AlignMode::GlobalShift,
            4,
        )
        .unwrap();
        let mean: f64 = diffs[0].iter().map(|&v| v as f64).sum::<f64>() / diffs[0].len() as f64;
        assert!(mean < 1e-6, "residual after alignment: {mean}");
    }

    #[test]
    fn flat_frames_tie_break_to_zero_shift() {
        let f = vec![0.5f32; CHANNELS * 64];
        assert_eq!(estimate_shift(&f, &f, 8, 3), (0, 0));
    }

    #[test]
    fn chunk_start_formula_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(0..200usize);
            let window = rng.random_range(2..20usize);
            let stride = rng.random_range(1..10usize);
            let got = chunk_starts(n, window, stride);
            let mut expect = Vec::new();
            let mut s = 0;
            while s + window <= n {
                expect.push(s);
                s += stride;
            }
            assert_eq!(got, expect, "n={n} window={window} stride={stride}");
        }
    }

    #[test]
    fn twenty_frames_window_16_stride_2_gives_three_chunks() {
        assert_eq!(chunk_starts(20, 16, 2), vec![0, 2, 4]);
    }

    #[test]
    fn short_sequence_yields_no_chunks() {
        let frames = vec![vec![0u8; CHANNELS * 16]; 10];
        let chunks = make_chunks(&frames, 4, TaillightState::Ooo, "seq", 16, 2);
        assert!(chunks.is_empty());
    }

    #[test]
    fn identity_augment_is_plain_conversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames: Vec<Vec<u8>> = (0..3)
            .map(|_| (0..CHANNELS * 36).map(|_| rng.random_range(0..=255)).collect())
            .collect();
        let out = augment_frames(&frames, 6, &AugmentSample::identity());
        for (o, raw) in out.iter().zip(&frames) {
            assert_eq!(o, &frame_to_f32(raw));
        }
    }

    #[test]
    fn flip_twice_restores_frame_and_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut f = rand_frame(6, &mut rng);
        let orig = f.clone();
        flip_chw(&mut f, 6);
        assert_ne!(f, orig);
        flip_chw(&mut f, 6);
        assert_eq!(f, orig);
        let s = AugmentSample {
            flip: true,
            ..AugmentSample::identity()
        };
        let once = augmented_label(TaillightState::Olo, &s);
        assert_eq!(once, TaillightState::Oor);
        assert_eq!(augmented_label(once, &s), TaillightState::Olo);
    }

    #[test]
    fn augment_keeps_values_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames: Vec<Vec<u8>> = (0..2)
            .map(|_| (0..CHANNELS * 16).map(|_| rng.random_range(0..=255)).collect())
            .collect();
        let cfg = AugmentConfig::default();
        for _ in 0..20 {
            let s = sample_augment(&cfg, &mut rng);
            for f in augment_frames(&frames, 4, &s) {
                assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn same_seed_same_augment_draws() {
        let cfg = AugmentConfig::default();
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            assert_eq!(sample_augment(&cfg, &mut a), sample_augment(&cfg, &mut b));
        }
    }

    #[test]
    fn resize_preserves_constant_and_identity() {
        let img = Image::filled(10, 10, [40, 80, 120]);
        let out = resize_chw(&img, 5);
        assert_eq!(&out[0..25], &[40u8; 25][..]);
        assert_eq!(&out[25..50], &[80u8; 25][..]);
        let mut img2 = Image::filled(4, 4, [0, 0, 0]);
        for y in 0..4 {
            for x in 0..4 {
                let v = (y * 4 + x) as u8 * 10;
                img2.set(x, y, [v, v, v]);
            }
        }
        let same = resize_chw(&img2, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(same[y * 4 + x], (y * 4 + x) as u8 * 10);
            }
        }
    }

    #[test]
    fn net_input_starts_with_raw_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames: Vec<Vec<f32>> = (0..4).map(|_| rand_frame(8, &mut rng)).collect();
        let input = net_input(&frames, 8, AlignMode::Identity, 0).unwrap();
        assert_eq!(input.len(), 4);
        assert_eq!(input[0], frames[0]);
        assert!(input[1].iter().all(|&v| v >= 0.0));
    }
}
