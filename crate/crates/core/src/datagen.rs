//! Synthetic micro-action video datasets, frame sampling and preprocessing.
//!
//! Every clip shows one or more soft "body part" blobs on a noisy
//! background. A fine class fixes the blob's resting position (its coarse
//! group picks a horizontal band, its rank inside the group a column) and
//! its oscillation: amplitude, frequency and direction. Emotion-style
//! datasets add a textured face rectangle at the top of the frame whose
//! colour and stripe pattern encode the emotion class.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{load_taxonomy, save_taxonomy, Annotation, LabelTaxonomy, Split};
use crate::tensor::Tensor;

/// Per-channel standardization applied after scaling pixels to [0, 1].
pub const PIXEL_MEAN: f64 = 0.45;
pub const PIXEL_STD: f64 = 0.225;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TAXONOMY_FILE: &str = "taxonomy.json";

/// Raw 8-bit RGB frames, stored frame-major as `[T, H, W, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Clip {
    pub clip_id: String,
    pub fps: u32,
    num_frames: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Clip {
    pub fn new(
        clip_id: impl Into<String>,
        fps: u32,
        num_frames: usize,
        height: usize,
        width: usize,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        if num_frames == 0 {
            return Err(Error::Shape("clip has no frames".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("degenerate frame size {height}x{width}")));
        }
        if pixels.len() != num_frames * height * width * 3 {
            return Err(Error::Shape(format!(
                "{} pixel bytes for {num_frames}x{height}x{width}x3",
                pixels.len()
            )));
        }
        Ok(Clip {
            clip_id: clip_id.into(),
            fps,
            num_frames,
            height,
            width,
            pixels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.pixels[t * n..(t + 1) * n]
    }

    /// New clip made of the given frame indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Clip> {
        let mut pixels = Vec::with_capacity(indices.len() * self.height * self.width * 3);
        for &i in indices {
            if i >= self.num_frames {
                return Err(Error::Shape(format!(
                    "frame {i} out of range 0..{}",
                    self.num_frames
                )));
            }
            pixels.extend_from_slice(self.frame(i));
        }
        Clip::new(self.clip_id.clone(), self.fps, indices.len(), self.height, self.width, pixels)
    }
}

// ---------------------------------------------------------------------------
// Sampling and preprocessing

/// Splits `raw` frames into `t` equal segments `[floor(i*raw/t),
/// floor((i+1)*raw/t))` and picks one index per segment: the middle
/// (`(start+end)/2`, rounded down) when `rng` is `None`, otherwise a uniform
/// draw. Segments of zero width (clips shorter than `t`) select their start,
/// so short clips repeat frames and the last frame is always reachable.
pub fn segment_indices(raw: usize, t: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<usize> {
    assert!(raw >= 1 && t >= 1, "segment_indices needs raw >= 1 and t >= 1");
    let bounds = |i: usize| i * raw / t;
    match rng {
        None => (0..t).map(|i| (bounds(i) + bounds(i + 1)) / 2).collect(),
        Some(rng) => (0..t)
            .map(|i| {
                let (s, e) = (bounds(i), bounds(i + 1));
                if e > s {
                    rng.random_range(s..e)
                } else {
                    s
                }
            })
            .collect(),
    }
}

/// Exactly `t` frames of `clip` chosen by [`segment_indices`].
pub fn sample_frames(clip: &Clip, t: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Clip> {
    if t == 0 {
        return Err(Error::Config("cannot sample zero frames".into()));
    }
    clip.select(&segment_indices(clip.num_frames(), t, rng))
}

/// Bilinear resize of one interleaved-RGB plane with half-pixel centres
/// and edge clamping. Equal sizes reproduce the input exactly.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let axis = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow * 3];
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = axis(x, w, ow);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * 3 + c];
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                out[(y * ow + x) * 3 + c] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Resizes every frame to `side x side`, scales to [0, 1] and standardizes
/// with [`PIXEL_MEAN`] / [`PIXEL_STD`]. Output shape `[T, side, side, 3]`.
pub fn preprocess_clip(clip: &Clip, side: usize) -> Result<Tensor> {
    if side < 8 {
        return Err(Error::Config(format!("input side {side} below 8")));
    }
    let (h, w) = (clip.height(), clip.width());
    let mut data = Vec::with_capacity(clip.num_frames() * side * side * 3);
    for t in 0..clip.num_frames() {
        let plane: Vec<f64> = clip.frame(t).iter().map(|&v| v as f64).collect();
        let resized = if (h, w) == (side, side) {
            plane
        } else {
            resize_bilinear(&plane, h, w, side, side)
        };
        data.extend(resized.into_iter().map(|v| (v / 255.0 - PIXEL_MEAN) / PIXEL_STD));
    }
    Tensor::from_vec(&[clip.num_frames(), side, side, 3], data)
}

/// Axis-aligned pixel rectangle `[x, y, w, h]`.
pub type BoxXywh = [usize; 4];

/// Crops each frame to its box (one box for the whole clip, or one per
/// frame). All crops must share a size so the result is a clip.
pub fn crop_clip(clip: &Clip, boxes: &[BoxXywh]) -> Result<Clip> {
    if boxes.len() != 1 && boxes.len() != clip.num_frames() {
        return Err(Error::Shape(format!(
            "{} boxes for {} frames",
            boxes.len(),
            clip.num_frames()
        )));
    }
    let [_, _, bw, bh] = boxes[0];
    let mut pixels = Vec::with_capacity(clip.num_frames() * bw * bh * 3);
    for t in 0..clip.num_frames() {
        let [x, y, w, h] = boxes[if boxes.len() == 1 { 0 } else { t }];
        if w == 0 || h == 0 {
            return Err(Error::Shape(format!("zero-area box {:?}", [x, y, w, h])));
        }
        if x + w > clip.width() || y + h > clip.height() {
            return Err(Error::Shape(format!(
                "box {:?} outside {}x{} frame",
                [x, y, w, h],
                clip.width(),
                clip.height()
            )));
        }
        if (w, h) != (bw, bh) {
            return Err(Error::Shape("per-frame boxes differ in size".into()));
        }
        let frame = clip.frame(t);
        for row in y..y + h {
            let start = (row * clip.width() + x) * 3;
            pixels.extend_from_slice(&frame[start..start + w * 3]);
        }
    }
    Clip::new(clip.clip_id.clone(), clip.fps, clip.num_frames(), bh, bw, pixels)
}

// ---------------------------------------------------------------------------
// Generator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub num_fine: usize,
    pub num_coarse: usize,
    /// Clips per class; with a long-tail exponent this is the head-class count.
    pub clips_per_class: usize,
    /// Class `k` (1-based) gets `max(1, round(clips_per_class * k^-e))` clips.
    pub long_tail_exponent: Option<f64>,
    pub raw_frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u32,
    /// Oscillation amplitude in pixels per fine class; distinct values.
    /// Empty means `1 + 2k/num_fine`.
    pub motion_amplitude: Vec<f64>,
    pub seed: u64,
    /// Emotion-style dataset: number of emotion classes. `clips_per_class`
    /// then counts clips per emotion.
    pub emotion_classes: Option<usize>,
    /// Inclusive range of actions per clip in emotion-style datasets.
    pub actions_per_clip: Option<[usize; 2]>,
    /// Per-class train:val:test ratio.
    pub split_ratio: [usize; 3],
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_fine: 6,
            num_coarse: 2,
            clips_per_class: 20,
            long_tail_exponent: None,
            raw_frames: 16,
            height: 32,
            width: 32,
            fps: 8,
            motion_amplitude: Vec::new(),
            seed: 0,
            emotion_classes: None,
            actions_per_clip: None,
            split_ratio: [2, 1, 1],
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_coarse == 0 || self.num_fine < self.num_coarse {
            return bad(format!(
                "need num_fine >= num_coarse >= 1, got {} and {}",
                self.num_fine, self.num_coarse
            ));
        }
        if self.clips_per_class == 0 || self.raw_frames == 0 || self.fps == 0 {
            return bad("clips_per_class, raw_frames and fps must be positive".into());
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("frame size {}x{} below 8x8", self.height, self.width));
        }
        if let Some(e) = self.long_tail_exponent {
            if !(e >= 0.0 && e.is_finite()) {
                return bad(format!("long-tail exponent {e} must be finite and >= 0"));
            }
            if self.emotion_classes.is_some() {
                return bad("long-tail counts apply to single-label datasets only".into());
            }
        }
        if !self.motion_amplitude.is_empty() {
            if self.motion_amplitude.len() != self.num_fine {
                return bad(format!(
                    "{} motion amplitudes for {} classes",
                    self.motion_amplitude.len(),
                    self.num_fine
                ));
            }
            let mut sorted = self.motion_amplitude.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).any(|p| p[0] == p[1]) || sorted.iter().any(|a| !(*a >= 0.0)) {
                return bad("motion amplitudes must be distinct and non-negative".into());
            }
        }
        if self.split_ratio.iter().sum::<usize>() == 0 {
            return bad("split ratio sums to zero".into());
        }
        match (self.emotion_classes, self.actions_per_clip) {
            (Some(0), _) => return bad("emotion_classes must be positive".into()),
            (Some(_), Some([lo, hi])) if lo == 0 || lo > hi || hi > self.num_fine => {
                return bad(format!("actions_per_clip [{lo}, {hi}] invalid for {} classes", self.num_fine));
            }
            (None, Some(_)) => return bad("actions_per_clip requires emotion_classes".into()),
            _ => {}
        }
        if self.emotion_classes.is_some() && self.height < 16 {
            return bad("emotion-style frames need height >= 16".into());
        }
        Ok(())
    }

    pub fn amplitude(&self, class: usize) -> f64 {
        if self.motion_amplitude.is_empty() {
            1.0 + 2.0 * class as f64 / self.num_fine as f64
        } else {
            self.motion_amplitude[class]
        }
    }

    /// Number of clips of each class (or emotion).
    pub fn class_counts(&self) -> Vec<usize> {
        let groups = self.emotion_classes.unwrap_or(self.num_fine);
        (1..=groups)
            .map(|k| match self.long_tail_exponent {
                None => self.clips_per_class,
                Some(e) => {
                    let n = (self.clips_per_class as f64 * (k as f64).powf(-e)).round() as usize;
                    n.max(1)
                }
            })
            .collect()
    }

    /// Face rectangle of emotion-style frames: top centre, half the width
    /// and a quarter of the height.
    pub fn face_box(&self) -> BoxXywh {
        let w = (self.width / 2).max(4);
        let h = (self.height / 4).max(4);
        [(self.width - w) / 2, 0, w, h]
    }
}

/// Per-class split sizes: `val = floor(n*rv/S)`, `test = floor(n*rt/S)`,
/// train takes the remainder.
pub fn split_counts(n: usize, ratio: [usize; 3]) -> [usize; 3] {
    let s: usize = ratio.iter().sum();
    let val = n * ratio[1] / s;
    let test = n * ratio[2] / s;
    [n - val - test, val, test]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub clip_id: String,
    pub split: Split,
    pub fine_ids: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<BoxXywh>,
    pub num_frames: usize,
    pub fps: u32,
}

impl ManifestRow {
    pub fn annotation(&self) -> Annotation {
        Annotation {
            clip_id: self.clip_id.clone(),
            split: self.split,
            fine_ids: self.fine_ids.clone(),
            emotion_id: self.emotion_id,
        }
    }

    /// The single fine label of a single-label row.
    pub fn single_label(&self) -> Result<usize> {
        match (self.fine_ids.len(), self.fine_ids.first()) {
            (1, Some(&id)) => Ok(id),
            (n, _) => Err(Error::Dataset(format!(
                "clip {} has {n} fine labels, expected exactly one",
                self.clip_id
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenSummary {
    pub num_clips: usize,
    /// train / val / test clip counts.
    pub split_sizes: [usize; 3],
    pub class_counts: Vec<usize>,
}

struct ClipPlan {
    row: ManifestRow,
    index: u64,
}

fn plan(spec: &GenSpec) -> Vec<ClipPlan> {
    let mut plans = Vec::new();
    let mut index = 0u64;
    for (class, &n) in spec.class_counts().iter().enumerate() {
        let [train, val, _] = split_counts(n, spec.split_ratio);
        for j in 0..n {
            let split = if j < train {
                Split::Train
            } else if j < train + val {
                Split::Val
            } else {
                Split::Test
            };
            let mut rng = clip_rng(spec.seed, index, 1);
            let (fine_ids, emotion_id, face_box) = match spec.emotion_classes {
                None => ([class].into(), None, None),
                Some(_) => {
                    let [lo, hi] = spec.actions_per_clip.unwrap_or([1, 1]);
                    let k = rng.random_range(lo..=hi);
                    let ids: BTreeSet<usize> = sample(&mut rng, spec.num_fine, k).into_iter().collect();
                    (ids, Some(class), Some(spec.face_box()))
                }
            };
            plans.push(ClipPlan {
                row: ManifestRow {
                    clip_id: format!("clip_{index:05}"),
                    split,
                    fine_ids,
                    emotion_id,
                    face_box,
                    num_frames: spec.raw_frames,
                    fps: spec.fps,
                },
                index,
            });
            index += 1;
        }
    }
    plans
}

/// Independent stream per (seed, clip, purpose).
fn clip_rng(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index * 4 + purpose);
    rng
}

const BACKGROUND: [f64; 3] = [60.0, 62.0, 70.0];
const BLOB: [f64; 3] = [235.0, 185.0, 145.0];
const EMOTION_PALETTE: [[f64; 3]; 8] = [
    [220.0, 60.0, 60.0],
    [60.0, 200.0, 80.0],
    [70.0, 90.0, 230.0],
    [230.0, 220.0, 70.0],
    [200.0, 80.0, 210.0],
    [70.0, 210.0, 210.0],
    [240.0, 150.0, 60.0],
    [150.0, 150.0, 150.0],
];

struct Motion {
    cx: f64,
    cy: f64,
    amp: f64,
    freq: f64,
    phase: f64,
    vertical: bool,
}

fn motion_for(spec: &GenSpec, tax: &LabelTaxonomy, class: usize, top: usize, rng: &mut ChaCha8Rng) -> Motion {
    let coarse = tax.fine()[class].coarse_id;
    let members: Vec<usize> = tax
        .fine()
        .iter()
        .filter(|f| f.coarse_id == coarse)
        .map(|f| f.id)
        .collect();
    let rank = members.iter().position(|&m| m == class).unwrap_or(0);
    let band_h = (spec.height - top) as f64 / spec.num_coarse as f64;
    let col_w = spec.width as f64 / members.len() as f64;
    let jitter = 0.6;
    Motion {
        cx: (rank as f64 + 0.5) * col_w + rng.random_range(-jitter..jitter),
        cy: top as f64 + (coarse as f64 + 0.5) * band_h + rng.random_range(-jitter..jitter),
        amp: spec.amplitude(class),
        freq: 0.5 + 0.5 * (class % 3) as f64,
        phase: rng.random_range(0.0..2.0 * PI),
        vertical: class % 2 == 1,
    }
}

fn render_clip(spec: &GenSpec, tax: &LabelTaxonomy, plan: &ClipPlan) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = clip_rng(spec.seed, plan.index, 2);
    let face = plan.row.face_box;
    let top = face.map_or(0, |[_, y, _, bh]| y + bh);
    let motions: Vec<Motion> = plan
        .row
        .fine_ids
        .iter()
        .map(|&c| motion_for(spec, tax, c, top, &mut rng))
        .collect();
    let radius = (h.min(w) as f64 / 12.0).max(1.5);
    let noise_amp = 6.0;
    let mut pixels = Vec::with_capacity(spec.raw_frames * h * w * 3);
    for t in 0..spec.raw_frames {
        let s = t as f64 / spec.fps as f64;
        let centres: Vec<(f64, f64)> = motions
            .iter()
            .map(|m| {
                let d = m.amp * (2.0 * PI * m.freq * s + m.phase).sin();
                if m.vertical {
                    (m.cx, m.cy + d)
                } else {
                    (m.cx + d, m.cy)
                }
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut colour = BACKGROUND;
                if let (Some([fx, fy, fw, fh]), Some(e)) = (face, plan.row.emotion_id) {
                    if x >= fx && x < fx + fw && y >= fy && y < fy + fh {
                        let period = 2 + e % 3;
                        let coord = if e % 2 == 0 { y - fy } else { x - fx };
                        let shade = if (coord / period) % 2 == 0 { 1.0 } else { 0.6 };
                        let base = EMOTION_PALETTE[e % EMOTION_PALETTE.len()];
                        colour = [base[0] * shade, base[1] * shade, base[2] * shade];
                    }
                }
                let mut alpha: f64 = 0.0;
                for &(cx, cy) in &centres {
                    let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                    alpha = alpha.max((-d2 / (2.0 * radius * radius)).exp());
                }
                for c in 0..3 {
                    let v = colour[c] * (1.0 - alpha) + BLOB[c] * alpha
                        + rng.random_range(-noise_amp..noise_amp);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    pixels
}

pub fn frame_path(root: &Path, split: Split, clip_id: &str, t: usize) -> PathBuf {
    root.join(split.as_str()).join(clip_id).join(format!("frame_{t:04}.png"))
}

fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    image::save_buffer_with_format(
        path,
        rgb,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok((rgb.height() as usize, rgb.width() as usize, rgb.into_raw()))
}

/// Writes frames, `manifest.jsonl` and `taxonomy.json` under `out_dir`.
/// The fine/coarse structure is [`LabelTaxonomy::synthetic`].
pub fn generate_dataset(spec: &GenSpec, out_dir: &Path) -> Result<GenSummary> {
    spec.validate()?;
    let tax = LabelTaxonomy::synthetic(spec.num_fine, spec.num_coarse)?;
    let plans = plan(spec);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    plans.par_iter().try_for_each(|p| -> Result<()> {
        let pixels = render_clip(spec, &tax, p);
        let dir = out_dir.join(p.row.split.as_str()).join(&p.row.clip_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n = spec.height * spec.width * 3;
        for t in 0..spec.raw_frames {
            let path = frame_path(out_dir, p.row.split, &p.row.clip_id, t);
            write_png(&path, spec.width, spec.height, &pixels[t * n..(t + 1) * n])?;
        }
        Ok(())
    })?;
    let rows: Vec<ManifestRow> = plans.into_iter().map(|p| p.row).collect();
    crate::io::write_jsonl(&out_dir.join(MANIFEST_FILE), &rows)?;
    save_taxonomy(&tax, out_dir.join(TAXONOMY_FILE))?;
    let mut split_sizes = [0; 3];
    for r in &rows {
        split_sizes[Split::ALL.iter().position(|&s| s == r.split).unwrap_or(0)] += 1;
    }
    Ok(GenSummary {
        num_clips: rows.len(),
        split_sizes,
        class_counts: spec.class_counts(),
    })
}

/// Renders one clip in memory exactly as [`generate_dataset`] would write it.
pub fn render_clip_by_index(spec: &GenSpec, index: usize) -> Result<(ManifestRow, Clip)> {
    spec.validate()?;
    let tax = LabelTaxonomy::synthetic(spec.num_fine, spec.num_coarse)?;
    let plans = plan(spec);
    let p = plans
        .get(index)
        .ok_or_else(|| Error::Config(format!("clip index {index} out of range")))?;
    let pixels = render_clip(spec, &tax, p);
    let clip = Clip::new(p.row.clip_id.clone(), spec.fps, spec.raw_frames, spec.height, spec.width, pixels)?;
    Ok((p.row.clone(), clip))
}

/// Reads `frame_0000.png`, `frame_0001.png`, ... from `dir` until the next
/// index is missing.
pub fn load_clip_dir(dir: &Path, fps: u32) -> Result<Clip> {
    let clip_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut pixels = Vec::new();
    let mut size = None;
    let mut t = 0;
    loop {
        let path = dir.join(format!("frame_{t:04}.png"));
        if !path.exists() {
            break;
        }
        let (h, w, data) = read_png(&path)?;
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(Error::Dataset(format!("{} changes frame size", dir.display())));
        }
        pixels.extend(data);
        t += 1;
    }
    let (h, w) = size.ok_or_else(|| Error::Dataset(format!("no frame_0000.png in {}", dir.display())))?;
    Clip::new(clip_id, fps, t, h, w, pixels)
}

/// A generated (or externally prepared) dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub taxonomy: LabelTaxonomy,
    pub rows: Vec<ManifestRow>,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let taxonomy = load_taxonomy(root.join(TAXONOMY_FILE))?;
        let rows: Vec<ManifestRow> = crate::io::read_jsonl(&root.join(MANIFEST_FILE))?;
        for r in &rows {
            if let Some(&bad) = r.fine_ids.iter().find(|&&id| id >= taxonomy.num_fine()) {
                return Err(Error::Dataset(format!(
                    "clip {} references unknown fine class {bad}",
                    r.clip_id
                )));
            }
            if r.num_frames == 0 {
                return Err(Error::Dataset(format!("clip {} has no frames", r.clip_id)));
            }
        }
        Ok(Dataset { root, taxonomy, rows })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_clip(&self, row: &ManifestRow) -> Result<Clip> {
        let mut pixels = Vec::new();
        let mut size = None;
        for t in 0..row.num_frames {
            let (h, w, data) = read_png(&frame_path(&self.root, row.split, &row.clip_id, t))?;
            match size {
                None => size = Some((h, w)),
                Some(s) if s != (h, w) => {
                    return Err(Error::Dataset(format!("clip {} changes frame size", row.clip_id)));
                }
                _ => {}
            }
            pixels.extend(data);
        }
        let (h, w) = size.unwrap_or((0, 0));
        Clip::new(row.clip_id.clone(), row.fps, row.num_frames, h, w, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_examples() {
        assert_eq!(segment_indices(16, 8, None), vec![1, 3, 5, 7, 9, 11, 13, 15]);
        assert_eq!(segment_indices(8, 8, None), (0..8).collect::<Vec<_>>());
        assert_eq!(segment_indices(5, 8, None), vec![0, 0, 1, 1, 2, 3, 3, 4]);
        assert_eq!(segment_indices(1, 4, None), vec![0; 4]);
    }

    #[test]
    fn random_sampling_stays_in_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let idx = segment_indices(20, 8, Some(&mut rng));
            for (i, &v) in idx.iter().enumerate() {
                assert!(v >= i * 20 / 8 && v < (i + 1) * 20 / 8);
            }
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(8, [2, 1, 1]), [4, 2, 2]);
        assert_eq!(split_counts(70, [5, 1, 1]), [50, 10, 10]);
        assert_eq!(split_counts(1, [2, 1, 1]), [1, 0, 0]);
    }

    #[test]
    fn spec_validation() {
        assert!(GenSpec::default().validate().is_ok());
        let bad = GenSpec { num_fine: 1, num_coarse: 2, ..GenSpec::default() };
        assert!(bad.validate().is_err());
        let bad = GenSpec { motion_amplitude: vec![1.0; 6], ..GenSpec::default() };
        assert!(bad.validate().is_err());
        let bad = GenSpec { actions_per_clip: Some([1, 2]), ..GenSpec::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clip_rejects_bad_buffers() {
        assert!(Clip::new("a", 8, 0, 8, 8, vec![]).is_err());
        assert!(Clip::new("a", 8, 1, 8, 8, vec![0; 10]).is_err());
    }
}
