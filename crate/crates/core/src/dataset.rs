//! Mask scoring and top-k selection, scale-and-crop augmentation, and the
//! JSON-lines manifests that connect pipeline stages.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{to_student_channels, ChannelStack, Image, SoftMask};
use crate::postprocess::BoundingBox;

/// One frame of one video, with whatever the pipeline knows about it so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub video_id: String,
    pub frame_index: u32,
    pub image_path: String,
    /// Soft mask for this frame (teacher output or student prediction).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, rename = "class", skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_boxes: Option<Vec<BoundingBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_scores: Option<Vec<f64>>,
    /// Fields this version does not know about, kept verbatim.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl DatasetEntry {
    pub fn new(video_id: impl Into<String>, frame_index: u32, image_path: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            frame_index,
            image_path: image_path.into(),
            mask_path: None,
            score: None,
            gt_box: None,
            gt_mask_path: None,
            split: None,
            class_name: None,
            pred_boxes: None,
            pred_scores: None,
            extra: serde_json::Map::new(),
        }
    }

    /// Grouping key for per-class reports.
    pub fn group(&self) -> &str {
        self.class_name.as_deref().unwrap_or(&self.video_id)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match self.score {
            Some(s) if !(s >= 0.0 && s.is_finite()) => Err(format!("invalid score {s}")),
            _ => Ok(()),
        }
    }
}

/// One augmented crop persisted for training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub video_id: String,
    pub frame_index: u32,
    pub crop: u32,
    /// Top-left corner of the crop in the upscaled frame.
    pub offset: [u32; 2],
    /// RGB crop at network input size (P6).
    pub image_path: String,
    /// Target mask at output size (P5).
    pub mask_path: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub input: ChannelStack,
    pub target: SoftMask,
    pub image_crop: Image,
    pub offset: (usize, usize),
}

/// Mean of the strictly positive values; 0 for an all-zero mask.
pub fn score_mask(mask: &SoftMask) -> f64 {
    let (sum, count) = mask
        .data()
        .iter()
        .filter(|&&v| v > 0)
        .fold((0u64, 0u64), |(s, c), &v| (s + v as u64, c + 1));
    if count == 0 {
        0.0
    } else {
        sum as f64 / count as f64
    }
}

/// Number of entries kept for fraction `k`: `⌈k·N⌉`, at least one for a
/// non-empty set. A tolerance absorbs products such as `0.07 × 100`
/// landing one ulp above an integer.
pub fn keep_count(k: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let exact = k * n as f64;
    let rounded = exact.round();
    let count = if (exact - rounded).abs() <= 1e-9 * n as f64 {
        rounded
    } else {
        exact.ceil()
    };
    (count as usize).clamp(1, n)
}

/// Keeps the top `⌈k·N⌉` entries by descending score; ties go to the
/// smaller `(video_id, frame_index)`. Results are nested in `k`.
pub fn select_top(entries: &[DatasetEntry], k: f64) -> Result<Vec<DatasetEntry>> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::argument(format!("keep fraction must be in (0, 1], got {k}")));
    }
    if let Some(e) = entries.iter().find(|e| e.score.is_none()) {
        return Err(Error::argument(format!(
            "entry {}#{} has no score",
            e.video_id, e.frame_index
        )));
    }
    let mut sorted: Vec<&DatasetEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| {
        b.score
            .unwrap()
            .total_cmp(&a.score.unwrap())
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then_with(|| a.frame_index.cmp(&b.frame_index))
    });
    Ok(sorted
        .into_iter()
        .take(keep_count(k, entries.len()))
        .cloned()
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    /// Side of the upscaled frame crops are taken from.
    pub scale: usize,
    /// Network input side.
    pub crop: usize,
    /// Target mask side.
    pub target: usize,
    pub n_random: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale: 160,
            crop: 128,
            target: 32,
            n_random: 4,
        }
    }
}

/// Scales image and mask to `scale²`, emits the center crop and then
/// `n_random` crops at offsets uniform in `[0, scale - crop]²`.
pub fn augment<R: Rng>(
    image: &Image,
    mask: &SoftMask,
    rng: &mut R,
    params: &AugmentParams,
) -> Result<Vec<TrainingExample>> {
    if image.channels() != 3 {
        return Err(Error::argument("augmentation needs an RGB image"));
    }
    if params.crop > params.scale || params.crop == 0 || params.target == 0 {
        return Err(Error::argument(format!("invalid augmentation sizes {params:?}")));
    }
    let big_image = image.resize(params.scale, params.scale)?;
    let big_mask = mask.resize(params.scale, params.scale)?;
    let span = params.scale - params.crop;
    let mut offsets = vec![(span / 2, span / 2)];
    for _ in 0..params.n_random {
        offsets.push((rng.random_range(0..=span), rng.random_range(0..=span)));
    }
    offsets
        .into_iter()
        .map(|(x, y)| {
            let image_crop = big_image.crop(x, y, params.crop, params.crop)?;
            let target = big_mask
                .crop(x, y, params.crop, params.crop)?
                .resize(params.target, params.target)?;
            Ok(TrainingExample {
                input: to_student_channels(&image_crop, params.crop)?,
                target,
                image_crop,
                offset: (x, y),
            })
        })
        .collect()
}

/// Resolves a manifest path field relative to the manifest's directory.
pub fn resolve(manifest: &Path, field: &str) -> PathBuf {
    let p = Path::new(field);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_entries(entries: &[DatasetEntry], path: &Path) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, e) in entries.iter().enumerate() {
        let fail = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        e.validate().map_err(fail)?;
        if !seen.insert((e.video_id.as_str(), e.frame_index)) {
            return Err(fail(format!(
                "duplicate entry {}#{}",
                e.video_id, e.frame_index
            )));
        }
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<DatasetEntry>> {
    let path = path.as_ref();
    let entries: Vec<DatasetEntry> = read_jsonl(path)?;
    check_entries(&entries, path)?;
    Ok(entries)
}

pub fn write_manifest(entries: &[DatasetEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    check_entries(entries, path)?;
    write_jsonl(entries, path)
}
