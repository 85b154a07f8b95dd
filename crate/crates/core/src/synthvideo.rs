//! Deterministic synthetic videos: one saturated object moving along a
//! smooth sinusoidal path over a low-saturation, noisy background, with the
//! exact rendered support as ground truth.

use std::f64::consts::TAU;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetEntry;
use crate::error::{Error, Result};
use crate::imagery::{write_netpbm, Image, SoftMask};
use crate::postprocess::BoundingBox;
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frame_w: usize,
    pub frame_h: usize,
    pub frames: usize,
    pub shape: Shape,
    pub area_min: f64,
    pub area_max: f64,
    /// Fixed object color; drawn per video when absent.
    pub object_color: Option<[u8; 3]>,
    /// Fixed background base color; drawn per video when absent.
    pub background_color: Option<[u8; 3]>,
    /// Path amplitude as a fraction of the free travel in each axis.
    pub motion_min: f64,
    pub motion_max: f64,
    /// Share of videos in each split whose object never moves, rounded to
    /// the nearest count. Motion cues vanish there while appearance cues
    /// remain, which is what separates a video teacher from a
    /// single-image student.
    pub still_fraction: f64,
    /// Sinusoid period range in frames.
    pub period_min: f64,
    pub period_max: f64,
    /// Per-pixel Gaussian noise, in units of full intensity.
    pub noise_sigma: f64,
    pub train_videos: usize,
    pub heldout_videos: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frame_w: 128,
            frame_h: 128,
            frames: 60,
            shape: Shape::Rectangle,
            area_min: 0.05,
            area_max: 0.20,
            object_color: None,
            background_color: None,
            motion_min: 0.5,
            motion_max: 1.0,
            still_fraction: 0.2,
            period_min: 40.0,
            period_max: 90.0,
            noise_sigma: 4.0 / 255.0,
            train_videos: 20,
            heldout_videos: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.frame_w == 0 || self.frame_h == 0 {
            return fail("frame size must be positive");
        }
        if self.frames < 2 {
            return fail("videos need at least 2 frames");
        }
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max < 1.0) {
            return fail("area fractions must satisfy 0 < min <= max < 1");
        }
        if !(0.0..=1.0).contains(&self.motion_min) || !(self.motion_min..=1.0).contains(&self.motion_max) {
            return fail("motion fractions must satisfy 0 <= min <= max <= 1");
        }
        if !(0.0..=1.0).contains(&self.still_fraction) {
            return fail("still fraction must lie in [0, 1]");
        }
        if !(self.period_min > 0.0 && self.period_min <= self.period_max) {
            return fail("period range must be positive and ordered");
        }
        if !(self.noise_sigma >= 0.0) {
            return fail("noise sigma must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub video_id: String,
    pub split: String,
    pub frames: Vec<Image>,
    pub gt_masks: Vec<SoftMask>,
    pub gt_boxes: Vec<BoundingBox>,
    /// Continuous object center per frame.
    pub centers: Vec<(f64, f64)>,
    /// Upper bound on the per-frame center displacement.
    pub step_bound: f64,
    pub object_size: (usize, usize),
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let sector = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - (sector % 2.0 - 1.0).abs());
    let (r, g, b) = match sector as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn object_pixels(shape: Shape, w: usize, h: usize) -> Vec<bool> {
    match shape {
        Shape::Rectangle => vec![true; w * h],
        Shape::Ellipse => {
            let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
            (0..w * h)
                .map(|i| {
                    let dx = ((i % w) as f64 + 0.5 - rx) / rx;
                    let dy = ((i / w) as f64 + 0.5 - ry) / ry;
                    dx * dx + dy * dy <= 1.0
                })
                .collect()
        }
    }
}

fn generate_video(config: &SynthConfig, video_id: String, split: &str, still: bool) -> Result<SynthVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        &[b"synth", video_id.as_bytes()],
    ));
    let (fw, fh) = (config.frame_w, config.frame_h);
    let frame_area = (fw * fh) as f64;

    let (w, h, footprint) = {
        let mut attempt = 0;
        loop {
            let a = rng.random_range(config.area_min..=config.area_max);
            let aspect = rng.random_range(0.6..1.6);
            let w = ((a * frame_area * aspect).sqrt().round() as usize).max(1);
            let h = ((a * frame_area / w as f64).round() as usize).max(1);
            if w <= fw && h <= fh {
                let fp = object_pixels(config.shape, w, h);
                let frac = fp.iter().filter(|&&b| b).count() as f64 / frame_area;
                if frac >= config.area_min && frac <= config.area_max {
                    break (w, h, fp);
                }
            }
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::Config(format!(
                    "synth: no object size fits a {fw}x{fh} frame with area fraction in [{}, {}]",
                    config.area_min, config.area_max
                )));
            }
        }
    };

    let background = config.background_color.unwrap_or_else(|| {
        let g: f64 = rng.random_range(50.0..150.0);
        [0, 1, 2].map(|_| (g + rng.random_range(-12.0..12.0)).round() as u8)
    });
    let object = config.object_color.unwrap_or_else(|| {
        hsv_to_rgb(
            rng.random_range(0.0..1.0),
            rng.random_range(0.75..1.0),
            rng.random_range(0.8..1.0),
        )
    });
    // Static low-frequency shading so the background is not flat.
    let shade_amp: f64 = rng.random_range(0.0..15.0);
    let shade_fx: f64 = rng.random_range(0.5..2.0) / fw as f64;
    let shade_fy: f64 = rng.random_range(0.5..2.0) / fh as f64;
    let shade_phase: f64 = rng.random_range(0.0..TAU);

    let travel_x = (fw - w) as f64 / 2.0;
    let travel_y = (fh - h) as f64 / 2.0;
    let motion = if still { 0.0 } else { 1.0 };
    let amp_x = motion * travel_x * rng.random_range(config.motion_min..=config.motion_max);
    let amp_y = motion * travel_y * rng.random_range(config.motion_min..=config.motion_max);
    let off_x = rng.random_range(-1.0..=1.0) * (travel_x - amp_x);
    let off_y = rng.random_range(-1.0..=1.0) * (travel_y - amp_y);
    let period_x = rng.random_range(config.period_min..=config.period_max);
    let period_y = rng.random_range(config.period_min..=config.period_max);
    let phase_x = rng.random_range(0.0..TAU);
    let phase_y = rng.random_range(0.0..TAU);
    let step_bound = ((TAU * amp_x / period_x).powi(2) + (TAU * amp_y / period_y).powi(2)).sqrt();

    let noise = Normal::new(0.0, config.noise_sigma * 255.0)
        .map_err(|e| Error::Config(format!("synth noise: {e}")))?;

    let mut video = SynthVideo {
        video_id,
        split: split.to_string(),
        frames: Vec::with_capacity(config.frames),
        gt_masks: Vec::with_capacity(config.frames),
        gt_boxes: Vec::with_capacity(config.frames),
        centers: Vec::with_capacity(config.frames),
        step_bound,
        object_size: (w, h),
    };
    for t in 0..config.frames {
        let tf = t as f64;
        let cx = fw as f64 / 2.0 + off_x + amp_x * (TAU * tf / period_x + phase_x).sin();
        let cy = fh as f64 / 2.0 + off_y + amp_y * (TAU * tf / period_y + phase_y).sin();
        let x0 = ((cx - w as f64 / 2.0).round().max(0.0) as usize).min(fw - w);
        let y0 = ((cy - h as f64 / 2.0).round().max(0.0) as usize).min(fh - h);

        let mut gt = vec![0u8; fw * fh];
        for (i, &on) in footprint.iter().enumerate() {
            if on {
                gt[(y0 + i / w) * fw + x0 + i % w] = 255;
            }
        }
        let mut data = Vec::with_capacity(fw * fh * 3);
        for y in 0..fh {
            for x in 0..fw {
                let fg = gt[y * fw + x] > 0;
                let shade = if fg {
                    0.0
                } else {
                    shade_amp * (TAU * (x as f64 * shade_fx + y as f64 * shade_fy) + shade_phase).sin()
                };
                let base = if fg { object } else { background };
                for c in base {
                    let v = c as f64 + shade + noise.sample(&mut rng);
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        let mask = SoftMask::new(fw, fh, gt)?;
        video.gt_boxes.push(tight_box(&mask).ok_or_else(|| {
            Error::Config("synth: object rendered outside the frame".into())
        })?);
        video.gt_masks.push(mask);
        video.frames.push(Image::new(fw, fh, 3, data)?);
        video.centers.push((cx, cy));
    }
    Ok(video)
}

pub fn tight_box(mask: &SoftMask) -> Option<BoundingBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) > 0 {
                x0 = x0.min(x as u32);
                y0 = y0.min(y as u32);
                x1 = x1.max(x as u32 + 1);
                y1 = y1.max(y as u32 + 1);
            }
        }
    }
    BoundingBox::new(x0, y0, x1, y1).ok()
}

/// Training videos first, then held-out ones.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthVideo>> {
    config.validate()?;
    let mut videos = Vec::with_capacity(config.train_videos + config.heldout_videos);
    for (split, n) in [("train", config.train_videos), ("heldout", config.heldout_videos)] {
        let still = still_set(config, split, n);
        for i in 0..n {
            videos.push(generate_video(config, format!("{split}-{i:03}"), split, still[i])?);
        }
    }
    Ok(videos)
}

/// Seeded choice of which videos in a split are still.
fn still_set(config: &SynthConfig, split: &str, n: usize) -> Vec<bool> {
    let count = ((config.still_fraction * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[b"synth-still", split.as_bytes()]));
    let mut still = vec![false; n];
    for i in sample(&mut rng, n, count) {
        still[i] = true;
    }
    still
}

/// Writes `frames/<video>/<index>.ppm` and `gt/<video>/<index>.pgm` under
/// `root` and returns manifest entries with paths relative to `root`.
pub fn write_video(video: &SynthVideo, root: &Path) -> Result<Vec<DatasetEntry>> {
    let mut entries = Vec::with_capacity(video.frames.len());
    for (i, ((frame, mask), gt_box)) in video
        .frames
        .iter()
        .zip(&video.gt_masks)
        .zip(&video.gt_boxes)
        .enumerate()
    {
        let image_path = format!("frames/{}/{i:04}.ppm", video.video_id);
        let gt_path = format!("gt/{}/{i:04}.pgm", video.video_id);
        write_netpbm(root.join(&image_path), frame)?;
        write_netpbm(root.join(&gt_path), &Image::from(mask.clone()))?;
        let mut e = DatasetEntry::new(&video.video_id, i as u32, image_path);
        e.gt_box = Some(*gt_box);
        e.gt_mask_path = Some(gt_path);
        e.split = Some(video.split.clone());
        entries.push(e);
    }
    Ok(entries)
}

/// Replaces `round(fraction · n)` masks, chosen by `rng`, with uniform
/// noise in `0..=64`. Returns the new masks and the replaced indices.
pub fn corrupt_masks<R: Rng>(
    masks: &[SoftMask],
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<SoftMask>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::argument(format!("corruption fraction {fraction} outside [0, 1]")));
    }
    let count = (fraction * masks.len() as f64).round() as usize;
    let mut chosen = sample(rng, masks.len(), count).into_vec();
    chosen.sort_unstable();
    let mut out = masks.to_vec();
    for &i in &chosen {
        let m = &masks[i];
        let data = (0..m.width() * m.height())
            .map(|_| rng.random_range(0..=64u8))
            .collect();
        out[i] = SoftMask::new(m.width(), m.height(), data)?;
    }
    Ok((out, chosen))
}
