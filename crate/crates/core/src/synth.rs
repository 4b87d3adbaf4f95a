//! Synthetic rear-view sequences for the eight taillight states.
//!
//! A sequence shows a schematic vehicle rear: body, two lamps, and a center
//! brake bar. Turn signals blink with a fixed period and duty cycle; braking
//! lifts both lamps to the brake color floor and lights the bar. Nuisance
//! factors: per-frame rigid jitter, Gaussian pixel noise, and an optional
//! bright patch drifting horizontally across the body, which adds blink-like
//! energy to frame differences without touching lamp or bar regions.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::DataError;
use crate::image::Image;
use crate::state::TaillightState;

/// Axis-aligned rectangle in normalized [0,1] scene coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FracRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl FracRect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> FracRect {
        FracRect { x0, y0, x1, y1 }
    }

    fn to_px(self, side: usize) -> PxRect {
        let s = side as f64;
        PxRect {
            x0: (self.x0 * s).round() as isize,
            y0: (self.y0 * s).round() as isize,
            x1: (self.x1 * s).round() as isize,
            y1: (self.y1 * s).round() as isize,
        }
    }

    fn contains(self, other: FracRect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    fn disjoint(self, other: FracRect) -> bool {
        self.x1 <= other.x0 || other.x1 <= self.x0 || self.y1 <= other.y0 || other.y1 <= self.y0
    }
}

/// Pixel-space rectangle, half-open.
#[derive(Clone, Copy, Debug)]
struct PxRect {
    x0: isize,
    y0: isize,
    x1: isize,
    y1: isize,
}

impl PxRect {
    fn shifted(self, dx: isize, dy: isize) -> PxRect {
        PxRect {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    fn shrunk(self, by: isize) -> PxRect {
        PxRect {
            x0: self.x0 + by,
            y0: self.y0 + by,
            x1: self.x1 - by,
            y1: self.y1 - by,
        }
    }

    fn is_empty(self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub side: usize,
    pub body: FracRect,
    pub lamp_left: FracRect,
    pub lamp_right: FracRect,
    pub center_bar: FracRect,
    pub background: [u8; 3],
    pub body_color: [u8; 3],
    pub lamp_off: [u8; 3],
    pub lamp_on: [u8; 3],
    pub brake_color: [u8; 3],
    pub distractor_color: [u8; 3],
    /// Blink period in frames; the lamp is lit for round(period * duty)
    /// frames of each period, starting at phase 0.
    pub blink_period: usize,
    pub duty: f64,
    /// Std-dev of additive Gaussian pixel noise, in [0,1] units of the
    /// 8-bit range.
    pub noise_sigma: f64,
    /// Whole-scene rigid shift each frame, uniform in [-jitter, jitter]^2.
    pub jitter_px: usize,
    /// Probability that a sequence carries a drifting bright patch.
    pub distractor_prob: f64,
    pub distractor_size: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            side: 64,
            // Lamp and bar regions are deliberately large (several percent of
            // the frame each): global average pooling dilutes evidence by its
            // area fraction, and blink transitions must stay visible in the
            // pooled features against the photometric noise floor.
            //
            // The vehicle sits off-center, as behind a laterally mounted
            // camera. Alignment cancels the static body out of difference
            // frames, so a blink is just a bare blob; pooled conv features
            // of a translated blob only tell left from right through border
            // effects, and the offset keeps the two lamps in sharply
            // different border contexts.
            body: FracRect::new(0.02, 0.16, 0.82, 0.90),
            lamp_left: FracRect::new(0.04, 0.66, 0.28, 0.88),
            lamp_right: FracRect::new(0.56, 0.66, 0.80, 0.88),
            center_bar: FracRect::new(0.30, 0.20, 0.54, 0.33),
            // Night palette: a dark vehicle against a darker road keeps the
            // static scene energy near the blink-transition energy, so the
            // features of difference frames are not dwarfed by the first
            // raw frame (there is no normalization layer to rebalance them).
            background: [8, 9, 11],
            body_color: [22, 24, 28],
            lamp_off: [25, 10, 10],
            lamp_on: [250, 60, 50],
            brake_color: [200, 45, 42],
            distractor_color: [170, 168, 160],
            blink_period: 8,
            duty: 0.5,
            noise_sigma: 0.01,
            jitter_px: 1,
            distractor_prob: 0.6,
            distractor_size: 7,
        }
    }
}

/// Vertical band (normalized y) the distractor patch drifts in. Kept clear
/// of the bar and lamps so label evidence is never occluded.
const DISTRACTOR_BAND: (f64, f64) = (0.35, 0.55);

impl SceneParams {
    pub fn validate(&self) -> Result<(), DataError> {
        let geo = |msg: &str| Err(DataError::SceneGeometry { detail: msg.into() });
        if self.side < 16 {
            return geo("side must be at least 16");
        }
        if !self.body.contains(self.lamp_left)
            || !self.body.contains(self.lamp_right)
            || !self.body.contains(self.center_bar)
        {
            return geo("lamps and center bar must lie inside the body");
        }
        if !self.lamp_left.disjoint(self.lamp_right) {
            return geo("lamps must not overlap");
        }
        if !self.center_bar.disjoint(self.lamp_left) || !self.center_bar.disjoint(self.lamp_right)
        {
            return geo("center bar must not overlap the lamps");
        }
        if self.blink_period < 2 {
            return geo("blink_period must be at least 2");
        }
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return geo("duty must lie in (0, 1)");
        }
        let on = self.on_frames();
        if on == 0 || on >= self.blink_period {
            return geo("duty leaves no off (or no on) frames in a period");
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return geo("distractor_prob must lie in [0, 1]");
        }
        if self.noise_sigma < 0.0 {
            return geo("noise_sigma must be non-negative");
        }
        let band_lo = DISTRACTOR_BAND.0;
        let band_hi = DISTRACTOR_BAND.1 + self.distractor_size as f64 / self.side as f64;
        let band = FracRect::new(self.body.x0, band_lo, self.body.x1, band_hi);
        if !band.disjoint(self.lamp_left)
            || !band.disjoint(self.lamp_right)
            || !band.disjoint(self.center_bar)
        {
            return geo("distractor band would reach a lamp or the center bar");
        }
        let body_px = self.body.to_px(self.side);
        if body_px.x1 - body_px.x0 <= self.distractor_size as isize + 1 {
            return geo("body too narrow for the distractor patch");
        }
        // The label oracle reads regions shrunk by jitter_px; they must
        // stay non-empty.
        let probe = self.jitter_px as isize;
        for r in [self.lamp_left, self.lamp_right, self.center_bar] {
            if r.to_px(self.side).shrunk(probe).is_empty() {
                return geo("jitter_px leaves no stable pixels inside a lamp or the bar");
            }
        }
        Ok(())
    }

    pub fn on_frames(&self) -> usize {
        (self.blink_period as f64 * self.duty).round() as usize
    }

    /// True when a blinking lamp is lit at frame t (phase 0).
    pub fn blink_on(&self, t: usize) -> bool {
        t % self.blink_period < self.on_frames()
    }
}

fn fill_px(img: &mut Image, r: PxRect, color: [u8; 3]) {
    img.fill_rect(r.x0, r.y0, r.x1, r.y1, color);
}

/// Pixel bounds `(x0, y0, x1, y1)` of `rect` shrunk by the scene's jitter:
/// the largest region guaranteed to stay inside the drawn shape in every
/// frame. None if the jitter swallows the whole rect.
pub fn stable_region(
    rect: FracRect,
    params: &SceneParams,
) -> Option<(isize, isize, isize, isize)> {
    let r = rect.to_px(params.side).shrunk(params.jitter_px as isize);
    if r.is_empty() {
        None
    } else {
        Some((r.x0, r.y0, r.x1, r.y1))
    }
}

/// Renders one sequence. All randomness (jitter, noise, distractor) comes
/// from the seed; the same seed renders byte-identical frames.
pub fn render_sequence(
    state: TaillightState,
    params: &SceneParams,
    frames: usize,
    seed: u64,
) -> Result<Vec<Image>, DataError> {
    params.validate()?;
    if frames < params.blink_period {
        return Err(DataError::invalid(format!(
            "sequence of {frames} frames cannot cover blink period {}",
            params.blink_period
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = params.side;
    let (brake, left, right) = state.bits();

    let body = params.body.to_px(side);
    let lamp_l = params.lamp_left.to_px(side);
    let lamp_r = params.lamp_right.to_px(side);
    let bar = params.center_bar.to_px(side);

    // Distractor track for the whole sequence.
    let has_distractor = rng.random_bool(params.distractor_prob);
    let patch = params.distractor_size as isize;
    let band_y0 = DISTRACTOR_BAND.0;
    let band_y1 = DISTRACTOR_BAND.1;
    let patch_y = (rng.random_range(band_y0..band_y1) * side as f64).round() as isize;
    let patch_x0 = rng.random_range(body.x0 as f64..(body.x1 - patch) as f64);
    let patch_vx = rng.random_range(0.4..1.2);

    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma * 255.0).expect("sigma is finite"))
    } else {
        None
    };

    let jit = params.jitter_px as i64;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let (dx, dy) = if jit > 0 {
            (
                rng.random_range(-jit..=jit) as isize,
                rng.random_range(-jit..=jit) as isize,
            )
        } else {
            (0, 0)
        };
        let mut img = Image::filled(side, side, params.background);
        fill_px(&mut img, body.shifted(dx, dy), params.body_color);

        if has_distractor {
            let span = (body.x1 - patch) - body.x0;
            let x = body.x0 as f64
                + (patch_x0 - body.x0 as f64 + patch_vx * t as f64).rem_euclid(span as f64);
            let x = x.round() as isize;
            let patch_rect = PxRect {
                x0: x,
                y0: patch_y,
                x1: x + patch,
                y1: patch_y + patch,
            };
            fill_px(&mut img, patch_rect.shifted(dx, dy), params.distractor_color);
        }

        if brake {
            fill_px(&mut img, bar.shifted(dx, dy), params.brake_color);
        }
        let lamp_base = if brake {
            params.brake_color
        } else {
            params.lamp_off
        };
        let lit = params.blink_on(t);
        let left_color = if left && lit { params.lamp_on } else { lamp_base };
        let right_color = if right && lit { params.lamp_on } else { lamp_base };
        fill_px(&mut img, lamp_l.shifted(dx, dy), left_color);
        fill_px(&mut img, lamp_r.shifted(dx, dy), right_color);

        if let Some(n) = &noise {
            for v in img.data_mut().iter_mut() {
                let sample: f64 = n.sample(&mut rng);
                *v = (*v as f64 + sample).round().clamp(0.0, 255.0) as u8;
            }
        }
        out.push(img);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub train_per_class: [usize; 8],
    pub test_per_class: [usize; 8],
    pub frames_per_sequence: usize,
    pub scene: SceneParams,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            train_per_class: [40; 8],
            test_per_class: [15; 8],
            frames_per_sequence: 48,
            scene: SceneParams::default(),
        }
    }
}

/// Class frequencies from the real-world distribution, scaled down 50x.
pub fn imbalanced_train_counts() -> [usize; 8] {
    let raw: [f64; 8] = [3256.0, 2247.0, 761.0, 903.0, 707.0, 373.0, 149.0, 246.0];
    let mut out = [0usize; 8];
    for (o, r) in out.iter_mut().zip(raw) {
        *o = (r / 50.0).round() as usize;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceRecord {
    /// Directory path relative to the dataset root.
    pub rel_path: String,
    pub frames: usize,
    pub label: TaillightState,
    pub split: Split,
}

#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    pub records: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SequenceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Reads every frame of one sequence.
    pub fn load_frames(&self, rec: &SequenceRecord) -> Result<Vec<Image>, DataError> {
        let dir = self.root.join(&rec.rel_path);
        (0..rec.frames)
            .map(|i| crate::image::read_ppm(&dir.join(format!("frame_{i:04}.ppm"))))
            .collect()
    }
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.ppm")
}

/// Renders and writes a dataset tree:
/// `root/<split>/<CLASS>/seq_<n>/frame_<k>.ppm` plus `manifest.csv`.
/// Sequence directories and the manifest are written to temporary names and
/// renamed into place, so a crash never leaves a half-written sequence
/// under its final name.
pub fn generate_dataset(
    root: &Path,
    cfg: &GenConfig,
    seed: u64,
) -> Result<Dataset, DataError> {
    cfg.scene.validate()?;
    if cfg.frames_per_sequence < cfg.scene.blink_period {
        return Err(DataError::invalid(
            "frames_per_sequence shorter than the blink period",
        ));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    fs::create_dir_all(root).map_err(|e| DataError::io(root, e))?;

    for (split, counts) in [
        (Split::Train, &cfg.train_per_class),
        (Split::Test, &cfg.test_per_class),
    ] {
        for state in TaillightState::ALL {
            let n = counts[state.index()];
            for idx in 0..n {
                let seq_seed = master.next_u64();
                let frames =
                    render_sequence(state, &cfg.scene, cfg.frames_per_sequence, seq_seed)?;
                let rel = format!("{}/{}/seq_{idx:04}", split.as_str(), state.code());
                let final_dir = root.join(&rel);
                let parent = final_dir.parent().expect("sequence dir has a parent");
                fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
                let tmp_dir = parent.join(format!(".seq_{idx:04}.tmp"));
                if tmp_dir.exists() {
                    fs::remove_dir_all(&tmp_dir).map_err(|e| DataError::io(&tmp_dir, e))?;
                }
                fs::create_dir(&tmp_dir).map_err(|e| DataError::io(&tmp_dir, e))?;
                for (i, frame) in frames.iter().enumerate() {
                    crate::image::write_ppm(&tmp_dir.join(frame_name(i)), frame)?;
                }
                fs::rename(&tmp_dir, &final_dir).map_err(|e| DataError::io(&final_dir, e))?;
                records.push(SequenceRecord {
                    rel_path: rel,
                    frames: cfg.frames_per_sequence,
                    label: state,
                    split,
                });
            }
        }
    }

    let mut manifest = String::from("path,frames,label,split\n");
    for r in &records {
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            r.rel_path,
            r.frames,
            r.label.code(),
            r.split.as_str()
        ));
    }
    let tmp = root.join(".manifest.csv.tmp");
    let path = root.join("manifest.csv");
    let mut f = fs::File::create(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    f.write_all(manifest.as_bytes())
        .map_err(|e| DataError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| DataError::io(&path, e))?;

    Ok(Dataset {
        root: root.to_path_buf(),
        records,
    })
}

/// Opens a dataset directory by parsing its manifest. Frames are read
/// lazily via [`Dataset::load_frames`].
pub fn read_dataset(root: &Path) -> Result<Dataset, DataError> {
    let path = root.join("manifest.csv");
    let text = fs::read_to_string(&path).map_err(|e| DataError::io(&path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "path,frames,label,split")) => {}
        other => {
            return Err(DataError::Manifest {
                line: 1,
                detail: format!(
                    "expected header 'path,frames,label,split', found {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            });
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(DataError::Manifest {
                line: lineno,
                detail: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let frames: usize = fields[1].parse().map_err(|_| DataError::Manifest {
            line: lineno,
            detail: format!("bad frame count '{}'", fields[1]),
        })?;
        let label = TaillightState::from_code(fields[2])
            .ok_or_else(|| DataError::UnknownClass {
                code: fields[2].to_string(),
            })?;
        let split = Split::parse(fields[3]).ok_or_else(|| DataError::Manifest {
            line: lineno,
            detail: format!("unknown split '{}'", fields[3]),
        })?;
        records.push(SequenceRecord {
            rel_path: fields[0].to_string(),
            frames,
            label,
            split,
        });
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{dominant_period, recover_label};

    fn quiet_scene() -> SceneParams {
        SceneParams {
            noise_sigma: 0.0,
            jitter_px: 0,
            distractor_prob: 0.0,
            ..SceneParams::default()
        }
    }

    fn lamp_red_series(frames: &[Image], rect: FracRect, side: usize) -> Vec<f64> {
        let px = rect.to_px(side);
        frames
            .iter()
            .map(|f| {
                f.region_mean(0, px.x0, px.y0, px.x1, px.y1)
                    .expect("lamp rect is non-empty")
            })
            .collect()
    }

    #[test]
    fn all_off_with_zero_noise_renders_identical_frames() {
        let scene = quiet_scene();
        let frames = render_sequence(TaillightState::Ooo, &scene, 12, 7).unwrap();
        for f in &frames[1..] {
            assert_eq!(f.data(), frames[0].data());
        }
        let series = lamp_red_series(&frames, scene.lamp_left, scene.side);
        assert!((series[0] - scene.lamp_off[0] as f64).abs() < 1e-9);
    }

    #[test]
    fn left_turn_alternates_four_on_four_off() {
        let scene = quiet_scene();
        let frames = render_sequence(TaillightState::Olo, &scene, 16, 1).unwrap();
        let left = lamp_red_series(&frames, scene.lamp_left, scene.side);
        let right = lamp_red_series(&frames, scene.lamp_right, scene.side);
        let on = scene.lamp_on[0] as f64;
        let off = scene.lamp_off[0] as f64;
        for (t, &v) in left.iter().enumerate() {
            let expect = if (t % 8) < 4 { on } else { off };
            assert!((v - expect).abs() < 1e-9, "frame {t}: {v}");
        }
        assert!(right.iter().all(|&v| (v - off).abs() < 1e-9));
    }

    #[test]
    fn brake_turn_blinks_above_brake_floor() {
        let scene = quiet_scene();
        let frames = render_sequence(TaillightState::Blr, &scene, 16, 2).unwrap();
        let left = lamp_red_series(&frames, scene.lamp_left, scene.side);
        let brake = scene.brake_color[0] as f64;
        let lo = left.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = left.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= brake - 1e-9, "dips below brake floor: {lo}");
        assert!(hi > lo, "no blink visible");
        // Bar is lit in every frame.
        let bar = lamp_red_series(&frames, scene.center_bar, scene.side);
        assert!(bar.iter().all(|&v| (v - brake).abs() < 1e-9));
    }

    #[test]
    fn bar_is_absent_without_brake() {
        let scene = quiet_scene();
        let frames = render_sequence(TaillightState::Olr, &scene, 16, 3).unwrap();
        let bar = lamp_red_series(&frames, scene.center_bar, scene.side);
        let body = scene.body_color[0] as f64;
        assert!(bar.iter().all(|&v| (v - body).abs() < 1e-9));
    }

    #[test]
    fn labels_recover_exactly_with_jitter_and_distractors() {
        let scene = SceneParams {
            noise_sigma: 0.0,
            distractor_prob: 1.0,
            ..SceneParams::default()
        };
        for state in TaillightState::ALL {
            for seed in 0..4 {
                let frames = render_sequence(state, &scene, 24, 100 + seed).unwrap();
                let got = recover_label(&frames, &scene);
                assert_eq!(got, Some(state), "state {state} seed {seed}");
            }
        }
    }

    #[test]
    fn autocorrelation_finds_the_blink_period() {
        for period in [4usize, 6, 8, 12] {
            let scene = SceneParams {
                blink_period: period,
                ..quiet_scene()
            };
            let frames = render_sequence(TaillightState::Olo, &scene, 48, 9).unwrap();
            let series = lamp_red_series(&frames, scene.lamp_left, scene.side);
            assert_eq!(dominant_period(&series), Some(period));
        }
    }

    #[test]
    fn same_seed_generates_byte_identical_trees() {
        let cfg = GenConfig {
            train_per_class: [1; 8],
            test_per_class: [1; 8],
            frames_per_sequence: 8,
            ..GenConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds_a = generate_dataset(a.path(), &cfg, 42).unwrap();
        let ds_b = generate_dataset(b.path(), &cfg, 42).unwrap();
        assert_eq!(ds_a.records, ds_b.records);
        for rec in &ds_a.records {
            for i in 0..rec.frames {
                let pa = a.path().join(&rec.rel_path).join(frame_name(i));
                let pb = b.path().join(&rec.rel_path).join(frame_name(i));
                assert_eq!(fs::read(pa).unwrap(), fs::read(pb).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join("manifest.csv")).unwrap(),
            fs::read(b.path().join("manifest.csv")).unwrap()
        );
    }

    #[test]
    fn generated_dataset_reads_back() {
        let cfg = GenConfig {
            train_per_class: [2, 1, 1, 1, 1, 1, 1, 1],
            test_per_class: [1; 8],
            frames_per_sequence: 8,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let written = generate_dataset(dir.path(), &cfg, 5).unwrap();
        let read = read_dataset(dir.path()).unwrap();
        assert_eq!(written.records, read.records);
        let rec = &read.records[0];
        let frames = read.load_frames(rec).unwrap();
        assert_eq!(frames.len(), 8);
        assert_eq!(frames[0].width(), cfg.scene.side);
    }

    #[test]
    fn missing_frame_is_reported_with_its_path() {
        let cfg = GenConfig {
            train_per_class: [1, 0, 0, 0, 0, 0, 0, 0],
            test_per_class: [0; 8],
            frames_per_sequence: 8,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(dir.path(), &cfg, 6).unwrap();
        let rec = ds.records[0].clone();
        let victim = dir.path().join(&rec.rel_path).join(frame_name(2));
        fs::remove_file(&victim).unwrap();
        match ds.load_frames(&rec) {
            Err(DataError::MissingFrame { path }) => {
                assert!(path.ends_with("frame_0002.ppm"), "path was {path:?}")
            }
            other => panic!("expected MissingFrame, got {other:?}"),
        }
    }

    #[test]
    fn truncated_frame_reports_byte_offset() {
        let cfg = GenConfig {
            train_per_class: [1, 0, 0, 0, 0, 0, 0, 0],
            test_per_class: [0; 8],
            frames_per_sequence: 8,
            ..GenConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(dir.path(), &cfg, 6).unwrap();
        let rec = ds.records[0].clone();
        let victim = dir.path().join(&rec.rel_path).join(frame_name(1));
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 10]).unwrap();
        match ds.load_frames(&rec) {
            Err(DataError::TruncatedImage { offset, expected, .. }) => {
                assert_eq!(expected as usize, bytes.len());
                assert_eq!(offset as usize, bytes.len() - 10);
            }
            other => panic!("expected TruncatedImage, got {other:?}"),
        }
    }

    #[test]
    fn unknown_class_code_in_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("manifest.csv"),
            "path,frames,label,split\ntrain/XXX/seq_0000,8,XXX,train\n",
        )
        .unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::UnknownClass { code }) => assert_eq!(code, "XXX"),
            other => panic!("expected UnknownClass, got {other:?}"),
        }
    }

    #[test]
    fn imbalanced_counts_follow_the_scaled_distribution() {
        assert_eq!(imbalanced_train_counts(), [65, 45, 15, 18, 14, 7, 3, 5]);
    }

    #[test]
    fn geometry_violations_are_rejected() {
        let mut scene = SceneParams::default();
        scene.lamp_left = FracRect::new(0.0, 0.0, 0.2, 0.2);
        assert!(matches!(
            scene.validate(),
            Err(DataError::SceneGeometry { .. })
        ));
        let mut scene = SceneParams::default();
        scene.lamp_right = scene.lamp_left;
        assert!(scene.validate().is_err());
        let mut scene = SceneParams::default();
        scene.duty = 0.01; // rounds to zero on-frames at period 8
        assert!(scene.validate().is_err());
        let mut scene = SceneParams::default();
        scene.blink_period = 1;
        assert!(scene.validate().is_err());
    }
}
