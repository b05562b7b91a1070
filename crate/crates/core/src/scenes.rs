//! Synthetic audio-visual clips: moving colored rectangles, one of which
//! "sounds" with a class-specific band pattern in a spectrogram-like grid.
//!
//! Event classes are `1..num_classes`; class 0 is background and labels
//! silent timesteps. Each class has its own color, size and audio band, so
//! the sounding blob is the only region whose appearance matches the audio.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::BBox;
use crate::rng::{item_stream, STREAM_DATASET};
use crate::tensor::Tensor;

pub const BACKGROUND_CLASS: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Event classes plus background.
    pub num_classes: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Frequency rows `M`.
    pub audio_height: usize,
    /// Time columns `N`.
    pub audio_width: usize,
    pub timesteps: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub silence_prob: f64,
    pub noise_std: f64,
    /// Largest per-step displacement along each axis, in pixels.
    pub max_speed: i32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_classes: 6,
            frame_height: 64,
            frame_width: 64,
            audio_height: 32,
            audio_width: 32,
            timesteps: 4,
            distractors_min: 1,
            distractors_max: 3,
            silence_prob: 0.15,
            noise_std: 0.05,
            max_speed: 3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn event_classes(&self) -> usize {
        self.num_classes - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.timesteps == 0 {
            return bad("timesteps must be positive".into());
        }
        if self.audio_height < self.event_classes() || self.audio_width == 0 {
            return bad(format!(
                "audio grid {}x{} cannot hold {} class bands",
                self.audio_height,
                self.audio_width,
                self.event_classes()
            ));
        }
        if self.distractors_min > self.distractors_max {
            return bad("distractors_min exceeds distractors_max".into());
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return bad(format!("silence_prob {} outside [0, 1]", self.silence_prob));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!(
                "noise_std {} must be finite and >= 0",
                self.noise_std
            ));
        }
        if self.max_speed < 0 {
            return bad("max_speed must be >= 0".into());
        }
        for k in 1..self.num_classes {
            let a = self.appearance(k);
            let travel = self.max_speed as usize * (self.timesteps - 1);
            if a.width + travel > self.frame_width || a.height + travel > self.frame_height {
                return bad(format!(
                    "class {k} blob {}x{} cannot move inside a {}x{} frame",
                    a.width, a.height, self.frame_width, self.frame_height
                ));
            }
        }
        Ok(())
    }

    /// Color and size of class `k ≥ 1`.
    pub fn appearance(&self, class: usize) -> Appearance {
        let i = class - 1;
        let hue = i as f64 / self.event_classes() as f64;
        Appearance {
            color: hue_to_rgb(hue),
            width: 16 + 4 * (i % 3),
            height: 16 + 4 * ((i / 3 + i) % 3),
        }
    }

    /// Half-open row range `[start, end)` of class `k`'s audio band.
    pub fn band_rows(&self, class: usize) -> (usize, usize) {
        let n = self.event_classes();
        let start = (class - 1) * self.audio_height / n;
        let height = (self.audio_height / n / 2).max(1);
        (start, start + height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub color: [f64; 3],
    pub width: usize,
    pub height: usize,
}

/// Fully saturated color at `hue ∈ [0, 1)`.
fn hue_to_rgb(hue: f64) -> [f64; 3] {
    let h = hue.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// One blob's path through the clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub class: usize,
    pub sounding: bool,
    pub velocity: (i32, i32),
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub id: usize,
    /// `T` frames, each `H×W×3`.
    pub frames: Vec<Tensor>,
    /// `T` grids, each `M×N×1`.
    pub audio: Vec<Tensor>,
    pub label: usize,
    /// Sounding-object boxes per timestep; empty when silent.
    pub gt: Vec<Vec<BBox>>,
    pub sounding: Vec<bool>,
    /// Sounding blob first, then distractors.
    pub tracks: Vec<Track>,
}

impl SceneSample {
    /// Per-timestep targets: the clip label, or background when silent.
    pub fn step_labels(&self) -> Vec<usize> {
        self.sounding
            .iter()
            .map(|&s| if s { self.label } else { BACKGROUND_CLASS })
            .collect()
    }

    pub fn frame_id(&self, t: usize) -> String {
        frame_id(self.id, t)
    }

    /// Every blob's box at timestep `t`, usable as region proposals.
    pub fn object_boxes(&self, t: usize) -> Vec<BBox> {
        self.tracks.iter().map(|tr| tr.boxes[t]).collect()
    }
}

pub fn frame_id(clip: usize, t: usize) -> String {
    format!("clip{clip:05}_t{t}")
}

/// A linear trajectory that keeps a `w×h` box inside the frame for `steps`.
fn sample_track<R: Rng>(cfg: &SceneConfig, class: usize, sounding: bool, rng: &mut R) -> Track {
    let a = cfg.appearance(class);
    let s = cfg.max_speed;
    let span = cfg.timesteps as i32 - 1;
    let mut axis = |extent: usize, size: usize| -> (i32, i32) {
        let v = rng.random_range(-s..=s);
        let lo = (-v * span).max(0);
        let hi = extent as i32 - size as i32 - (v * span).max(0);
        (rng.random_range(lo..=hi), v)
    };
    let (x0, vx) = axis(cfg.frame_width, a.width);
    let (y0, vy) = axis(cfg.frame_height, a.height);
    let boxes = (0..cfg.timesteps as i32)
        .map(|t| {
            let (x, y) = ((x0 + vx * t) as u32, (y0 + vy * t) as u32);
            BBox::new(x, y, x + a.width as u32, y + a.height as u32).expect("positive size")
        })
        .collect();
    Track {
        class,
        sounding,
        velocity: (vx, vy),
        boxes,
    }
}

fn overlaps(a: &BBox, b: &BBox) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

const PLACEMENT_ATTEMPTS: usize = 64;

/// Draws one clip from `rng`.
pub fn generate_clip(cfg: &SceneConfig, id: usize, rng: &mut ChaCha8Rng) -> Result<SceneSample> {
    cfg.validate()?;
    let t_len = cfg.timesteps;
    let label = rng.random_range(1..cfg.num_classes);
    let sounding: Vec<bool> = (0..t_len)
        .map(|_| !rng.random_bool(cfg.silence_prob))
        .collect();

    let mut tracks = vec![sample_track(cfg, label, true, rng)];
    let mut others: Vec<usize> = (1..cfg.num_classes).filter(|&k| k != label).collect();
    let wanted = rng
        .random_range(cfg.distractors_min..=cfg.distractors_max)
        .min(others.len());
    for _ in 0..wanted {
        let class = others.swap_remove(rng.random_range(0..others.len()));
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand = sample_track(cfg, class, false, rng);
            let clear = tracks.iter().all(|tr| {
                tr.boxes
                    .iter()
                    .zip(&cand.boxes)
                    .all(|(a, b)| !overlaps(a, b))
            });
            if clear {
                tracks.push(cand);
                break;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Argument(e.to_string()))?;
    let (h, w) = (cfg.frame_height, cfg.frame_width);
    let (m, n) = (cfg.audio_height, cfg.audio_width);
    let mut frames = Vec::with_capacity(t_len);
    let mut audio = Vec::with_capacity(t_len);
    let mut gt = Vec::with_capacity(t_len);
    for (t, &on) in sounding.iter().enumerate() {
        let mut px = vec![0.0; h * w * 3];
        // Drawn back to front so the sounding blob is on top.
        for tr in tracks.iter().rev() {
            let color = cfg.appearance(tr.class).color;
            let b = tr.boxes[t];
            for y in b.y0 as usize..b.y1 as usize {
                for x in b.x0 as usize..b.x1 as usize {
                    px[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
        let mut grid = vec![0.0; m * n];
        if on {
            let loudness = rng.random_range(0.7..=1.0);
            let (r0, r1) = cfg.band_rows(label);
            for v in &mut grid[r0 * n..r1 * n] {
                *v = loudness;
            }
            gt.push(vec![tracks[0].boxes[t]]);
        } else {
            gt.push(Vec::new());
        }
        if cfg.noise_std > 0.0 {
            for v in px.iter_mut().chain(grid.iter_mut()) {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        frames.push(Tensor::new(&[h, w, 3], px)?);
        audio.push(Tensor::new(&[m, n, 1], grid)?);
    }
    Ok(SceneSample {
        id,
        frames,
        audio,
        label,
        gt,
        sounding,
        tracks,
    })
}

/// Clip `index` of the dataset seeded by `cfg.seed`.
pub fn generate_indexed(cfg: &SceneConfig, index: usize) -> Result<SceneSample> {
    let mut rng = item_stream(cfg.seed, STREAM_DATASET, index as u64);
    generate_clip(cfg, index, &mut rng)
}

/// Clips `start..start + count`, generated in parallel.
pub fn generate_range(cfg: &SceneConfig, start: usize, count: usize) -> Result<Vec<SceneSample>> {
    (start..start + count)
        .into_par_iter()
        .map(|i| generate_indexed(cfg, i))
        .collect()
}

pub fn generate_dataset(cfg: &SceneConfig, count: usize) -> Result<Vec<SceneSample>> {
    generate_range(cfg, 0, count)
}
