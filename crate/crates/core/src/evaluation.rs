//! Box IoU, CorLoc, max F-measure against boxes, and per-pixel P/J scores.
//!
//! Conventions pinned here and echoed into every [`EvalReport`]:
//!
//! * max F-measure: per frame, nonzero pixels `>= t` are predicted positive and
//!   pixels inside any ground-truth box are positive; frame F-scores are
//!   averaged at a shared threshold and the best threshold is reported.
//! * CorLoc: the first (highest-scoring) predicted box must reach IoU 0.5
//!   with any ground-truth box.
//! * Pixel metrics report accuracy and precision side by side.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::SoftMask;
use crate::postprocess::{BinaryMask, BoundingBox};

pub const PASCAL_IOU: f64 = 0.5;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0)) as u64;
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0)) as u64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorLoc {
    pub localized: usize,
    pub total: usize,
    /// Frames with ground truth but no prediction list.
    pub missing: Vec<usize>,
}

impl CorLoc {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.localized as f64 / self.total as f64
        }
    }
}

/// `predictions[i]` is `None` when frame `i` has no prediction record; such
/// frames count as not localized. Frames with no ground truth are skipped.
pub fn corloc(predictions: &[Option<Vec<BoundingBox>>], ground_truth: &[Vec<BoundingBox>]) -> CorLoc {
    let mut out = CorLoc::default();
    for (i, gt) in ground_truth.iter().enumerate() {
        if gt.is_empty() {
            continue;
        }
        out.total += 1;
        match predictions.get(i).and_then(|p| p.as_ref()) {
            None => {
                log::warn!("corloc: frame {i} has no prediction list");
                out.missing.push(i);
            }
            Some(pred) => {
                if let Some(first) = pred.first() {
                    if gt.iter().any(|g| iou(first, g) >= PASCAL_IOU) {
                        out.localized += 1;
                    }
                }
            }
        }
    }
    out
}

/// Positive/total pixel counts per value: `inside[v]` counts pixels with
/// value `v` inside the union of boxes.
fn value_histograms(mask: &SoftMask, boxes: &[BoundingBox]) -> ([u64; 256], [u64; 256]) {
    let mut inside = [0u64; 256];
    let mut outside = [0u64; 256];
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let v = mask.get(x, y) as usize;
            if boxes.iter().any(|b| b.contains(x as u32, y as u32)) {
                inside[v] += 1;
            } else {
                outside[v] += 1;
            }
        }
    }
    (inside, outside)
}

/// F-score from integer counts; 0 when precision or recall is undefined.
pub(crate) fn f_score(tp: u64, predicted: u64, positives: u64) -> f64 {
    if tp == 0 || predicted == 0 || positives == 0 {
        return 0.0;
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / positives as f64;
    2.0 * p * r / (p + r)
}

/// Per-threshold F-scores (index `t` = threshold `t`) for one frame.
pub fn f_curve(mask: &SoftMask, boxes: &[BoundingBox]) -> [f64; 256] {
    let (inside, outside) = value_histograms(mask, boxes);
    let positives: u64 = inside.iter().sum();
    let mut curve = [0.0; 256];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Zero-valued pixels are never predicted foreground, so t = 0 and
    // t = 1 select the same set.
    for t in (0..256).rev() {
        if t > 0 {
            tp += inside[t];
            fp += outside[t];
        }
        curve[t] = f_score(tp, tp + fp, positives);
    }
    curve
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxF {
    pub value: f64,
    pub threshold: u8,
    pub frames: usize,
}

/// Masks must already be at frame resolution. Frames without boxes are
/// skipped; with no evaluable frame the result is 0.
pub fn max_f_measure(masks: &[SoftMask], gt_boxes: &[Vec<BoundingBox>]) -> Result<MaxF> {
    if masks.len() != gt_boxes.len() {
        return Err(Error::argument(format!(
            "{} masks but {} ground-truth lists",
            masks.len(),
            gt_boxes.len()
        )));
    }
    let mut sum = [0.0f64; 256];
    let mut frames = 0;
    for (mask, boxes) in masks.iter().zip(gt_boxes) {
        if boxes.is_empty() {
            continue;
        }
        let curve = f_curve(mask, boxes);
        for (s, f) in sum.iter_mut().zip(curve) {
            *s += f;
        }
        frames += 1;
    }
    if frames == 0 {
        return Ok(MaxF {
            value: 0.0,
            threshold: 0,
            frames: 0,
        });
    }
    let mut best = MaxF {
        value: f64::NEG_INFINITY,
        threshold: 0,
        frames,
    };
    for (t, s) in sum.iter().enumerate() {
        let f = s / frames as f64;
        if f > best.value {
            best.value = f;
            best.threshold = t as u8;
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn pixel_metrics(predicted: &BinaryMask, truth: &BinaryMask) -> Result<PixelMetrics> {
    if predicted.width() != truth.width() || predicted.height() != truth.height() {
        return Err(Error::argument(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            predicted.width(),
            predicted.height(),
            truth.width(),
            truth.height()
        )));
    }
    let n = predicted.data().len();
    if n == 0 {
        return Err(Error::argument("pixel accuracy of an empty image is undefined"));
    }
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (&p, &t) in predicted.data().iter().zip(truth.data()) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    Ok(PixelMetrics {
        accuracy: ratio(n - fp - fneg, n),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fneg),
        jaccard: ratio(tp, tp + fp + fneg),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub value: f64,
    pub frames: usize,
}

/// One metric over a dataset, broken down by class (or video when no class
/// label exists).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub per_class: BTreeMap<String, GroupScore>,
    /// Frame-weighted mean of the per-class values.
    pub mean: f64,
    pub frame_count: usize,
    pub config: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_groups(
        metric: impl Into<String>,
        per_class: BTreeMap<String, GroupScore>,
        config: BTreeMap<String, String>,
    ) -> Self {
        let frame_count: usize = per_class.values().map(|g| g.frames).sum();
        let weighted: f64 = per_class.values().map(|g| g.value * g.frames as f64).sum();
        let mean = if frame_count == 0 {
            0.0
        } else {
            weighted / frame_count as f64
        };
        Self {
            metric: metric.into(),
            per_class,
            mean,
            frame_count,
            config,
        }
    }

    pub fn to_table(&self) -> String {
        let width = self
            .per_class
            .keys()
            .map(|k| k.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!("{}\n", self.metric);
        out += &format!("{:<width$}  {:>8}  {:>6}\n", "class", "value", "frames");
        for (k, g) in &self.per_class {
            out += &format!("{k:<width$}  {:>8.4}  {:>6}\n", g.value, g.frames);
        }
        out += &format!(
            "{:<width$}  {:>8.4}  {:>6}\n",
            "mean", self.mean, self.frame_count
        );
        for (k, v) in &self.config {
            out += &format!("  {k} = {v}\n");
        }
        out
    }
}
