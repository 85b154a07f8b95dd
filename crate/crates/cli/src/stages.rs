//! The pipeline stages. Every stage reads manifests, writes files under the
//! work directory and returns the manifest it produced. Paths recorded in
//! output manifests are relative to the work directory, so two runs in
//! different directories produce identical bytes.
//!
//! Work directory layout:
//!
//! ```text
//! train.jsonl, heldout.jsonl      synth: frames/, gt/
//! teacher_<input>.jsonl           teach: teacher/<video>/<frame>.pgm
//! selected.jsonl                  select
//! augmented.jsonl                 augment: aug/<video>/<frame>_<crop>.{ppm,pgm}
//! model.usfg, loss.csv            train (checkpoint.usfg with optimizer state)
//! student_<input>.jsonl           infer: student/<video>/<frame>.pgm
//! boxes_<input>.jsonl             boxes
//! reports/<metric>_<input>.json   eval; reports/summary.json from pipeline
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use usfg_core::dataset::{
    augment, read_manifest, resolve, score_mask, select_top, write_jsonl, write_manifest, TrainingRecord,
};
use usfg_core::evaluation::{corloc, max_f_measure, pixel_metrics, EvalReport, GroupScore, PixelMetrics};
use usfg_core::imagery::{read_image, read_mask, to_student_channels, write_netpbm, Image, SoftMask};
use usfg_core::postprocess::{binarize, fit_boxes, BinaryMask, BoundingBox};
use usfg_core::rng::frame_rng;
use usfg_core::student::{infer, load_checkpoint, save_checkpoint, train_from_manifest};
use usfg_core::synthvideo::{generate, write_video};
use usfg_core::teacher::discover;
use usfg_core::DatasetEntry;

use crate::config::{Metric, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const HELDOUT_MANIFEST: &str = "heldout.jsonl";
pub const SELECTED_MANIFEST: &str = "selected.jsonl";
pub const AUGMENTED_MANIFEST: &str = "augmented.jsonl";
pub const MODEL: &str = "model.usfg";
pub const CHECKPOINT: &str = "checkpoint.usfg";
pub const LOSS_LOG: &str = "loss.csv";
pub const REPORTS: &str = "reports";

pub struct Context {
    pub config: RunConfig,
    workdir: PathBuf,
    pool: rayon::ThreadPool,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into())
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn frame_file(dir: &str, e: &DatasetEntry, ext: &str) -> String {
    format!("{dir}/{}/{:04}.{ext}", e.video_id, e.frame_index)
}

fn mask_field<'a>(e: &'a DatasetEntry, manifest: &Path) -> Result<&'a str> {
    e.mask_path.as_deref().ok_or_else(|| {
        CliError::Invalid(format!(
            "{}: {}#{} has no mask_path",
            manifest.display(),
            e.video_id,
            e.frame_index
        ))
    })
}

/// Entry indices grouped by video in order of first appearance, each group
/// sorted by frame index.
fn videos(entries: &[DatasetEntry]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut slot = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let s = *slot.entry(e.video_id.clone()).or_insert_with(|| {
            order.push((e.video_id.clone(), Vec::new()));
            order.len() - 1
        });
        order[s].1.push(i);
    }
    for (_, idx) in &mut order {
        idx.sort_by_key(|&i| entries[i].frame_index);
    }
    order
}

/// Entry indices grouped by report group, keeping manifest order inside
/// each group.
fn groups(entries: &[DatasetEntry]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        out.entry(e.group().to_string()).or_default().push(i);
    }
    out
}

impl Context {
    pub fn new(config: RunConfig, workers: usize) -> Result<Self> {
        let workdir = std::path::absolute(config.workdir()).map_err(|e| {
            CliError::Invalid(format!("work directory {}: {e}", config.workdir().display()))
        })?;
        fs::create_dir_all(&workdir)
            .map_err(|e| CliError::Invalid(format!("cannot create {}: {e}", workdir.display())))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(runtime)?;
        Ok(Self { config, workdir, pool })
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    /// The given path or the default under the work directory; it must exist.
    fn input(&self, given: Option<&Path>, default: &str) -> Result<PathBuf> {
        let path = match given {
            Some(p) => std::path::absolute(p).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?,
            None => self.workdir.join(default),
        };
        if !path.is_file() {
            return Err(CliError::Invalid(format!("input {} does not exist", path.display())));
        }
        Ok(path)
    }

    /// Re-expresses a path field of `manifest` relative to the work directory.
    fn rebase(&self, manifest: &Path, field: &str) -> String {
        let p = resolve(manifest, field);
        match p.strip_prefix(&self.workdir) {
            Ok(rel) => path_string(rel),
            Err(_) => path_string(&p),
        }
    }

    fn rebase_entry(&self, manifest: &Path, e: &DatasetEntry) -> DatasetEntry {
        let mut out = e.clone();
        out.image_path = self.rebase(manifest, &e.image_path);
        out.mask_path = e.mask_path.as_deref().map(|p| self.rebase(manifest, p));
        out.gt_mask_path = e.gt_mask_path.as_deref().map(|p| self.rebase(manifest, p));
        out
    }

    fn frame_size(&self, manifest: &Path, e: &DatasetEntry) -> Result<(usize, usize)> {
        let image = read_image(resolve(manifest, &e.image_path))?;
        Ok((image.width(), image.height()))
    }

    /// Generates the corpus; returns the training and held-out manifests.
    pub fn synth(&self) -> Result<(PathBuf, PathBuf)> {
        let videos = generate(&self.config.synth)?;
        let written = self.pool.install(|| {
            videos
                .par_iter()
                .map(|v| write_video(v, &self.workdir))
                .collect::<usfg_core::Result<Vec<_>>>()
        })?;
        let (mut train, mut heldout) = (Vec::new(), Vec::new());
        for (v, entries) in videos.iter().zip(written) {
            if v.split == "train" {
                train.extend(entries);
            } else {
                heldout.extend(entries);
            }
        }
        let train_path = self.workdir.join(TRAIN_MANIFEST);
        let heldout_path = self.workdir.join(HELDOUT_MANIFEST);
        write_manifest(&train, &train_path)?;
        write_manifest(&heldout, &heldout_path)?;
        log::info!(
            "synth: {} training and {} held-out frames in {}",
            train.len(),
            heldout.len(),
            self.workdir.display()
        );
        Ok((train_path, heldout_path))
    }

    /// Runs the teacher on every video of each input manifest; returns one
    /// output manifest per input.
    pub fn teach(&self, inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
        let inputs: Vec<PathBuf> = if inputs.is_empty() {
            vec![
                self.input(None, TRAIN_MANIFEST)?,
                self.input(None, HELDOUT_MANIFEST)?,
            ]
        } else {
            inputs.iter().map(|p| self.input(Some(p), "")).collect::<Result<_>>()?
        };
        let mut outputs = Vec::new();
        for input in inputs {
            let entries = read_manifest(&input)?;
            let per_video = self.pool.install(|| {
                videos(&entries)
                    .par_iter()
                    .map(|(video_id, idx)| -> Result<Vec<DatasetEntry>> {
                        let frames = idx
                            .iter()
                            .map(|&i| read_image(resolve(&input, &entries[i].image_path)))
                            .collect::<usfg_core::Result<Vec<Image>>>()?;
                        let found = discover(&frames, &self.config.teacher)?;
                        for w in &found.warnings {
                            log::warn!("teach {video_id}: {w}");
                        }
                        idx.iter()
                            .zip(found.masks)
                            .map(|(&i, mask)| {
                                let mut e = self.rebase_entry(&input, &entries[i]);
                                let rel = frame_file("teacher", &e, "pgm");
                                write_netpbm(self.workdir.join(&rel), &Image::from(mask))?;
                                e.mask_path = Some(rel);
                                e.score = None;
                                Ok(e)
                            })
                            .collect()
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let out: Vec<DatasetEntry> = per_video.into_iter().flatten().collect();
            let path = self.workdir.join(format!("teacher_{}.jsonl", stem(&input)));
            write_manifest(&out, &path)?;
            log::info!("teach: {} masks -> {}", out.len(), path.display());
            outputs.push(path);
        }
        Ok(outputs)
    }

    /// Scores every mask and keeps the configured top fraction.
    pub fn select(&self, input: Option<&Path>) -> Result<PathBuf> {
        let input = self.input(input, "teacher_train.jsonl")?;
        let entries = read_manifest(&input)?;
        let scored = self.pool.install(|| {
            entries
                .par_iter()
                .map(|e| {
                    let mask = read_mask(resolve(&input, mask_field(e, &input)?))?;
                    let mut out = self.rebase_entry(&input, e);
                    out.score = Some(score_mask(&mask));
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let kept = select_top(&scored, self.config.select.keep_fraction)?;
        let path = self.workdir.join(SELECTED_MANIFEST);
        write_manifest(&kept, &path)?;
        log::info!(
            "select: kept {} of {} (keep fraction {})",
            kept.len(),
            scored.len(),
            self.config.select.keep_fraction
        );
        Ok(path)
    }

    /// Writes the crops of every selected frame and their training manifest.
    pub fn augment(&self, input: Option<&Path>) -> Result<PathBuf> {
        let input = self.input(input, SELECTED_MANIFEST)?;
        let entries = read_manifest(&input)?;
        let params = self.config.augment;
        let seed = self.config.seed;
        let records = self.pool.install(|| {
            entries
                .par_iter()
                .map(|e| -> Result<Vec<TrainingRecord>> {
                    let image = read_image(resolve(&input, &e.image_path))?;
                    let mask = read_mask(resolve(&input, mask_field(e, &input)?))?;
                    let mut rng = frame_rng(seed, &e.video_id, e.frame_index);
                    augment(&image, &mask, &mut rng, &params)?
                        .into_iter()
                        .enumerate()
                        .map(|(c, ex)| {
                            let base = format!("aug/{}/{:04}_{c}", e.video_id, e.frame_index);
                            let image_path = format!("{base}.ppm");
                            let mask_path = format!("{base}.pgm");
                            write_netpbm(self.workdir.join(&image_path), &ex.image_crop)?;
                            write_netpbm(self.workdir.join(&mask_path), &Image::from(ex.target))?;
                            Ok(TrainingRecord {
                                video_id: e.video_id.clone(),
                                frame_index: e.frame_index,
                                crop: c as u32,
                                offset: [ex.offset.0 as u32, ex.offset.1 as u32],
                                image_path,
                                mask_path,
                            })
                        })
                        .collect()
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let records: Vec<TrainingRecord> = records.into_iter().flatten().collect();
        let path = self.workdir.join(AUGMENTED_MANIFEST);
        write_jsonl(&records, &path)?;
        log::info!("augment: {} crops from {} frames", records.len(), entries.len());
        Ok(path)
    }

    /// Trains single-threaded and saves the final weights.
    pub fn train(&self, input: Option<&Path>) -> Result<PathBuf> {
        let input = self.input(input, AUGMENTED_MANIFEST)?;
        let mut config = self.config.train.clone();
        config.loss_log = Some(self.workdir.join(LOSS_LOG));
        if config.checkpoint_every > 0 {
            config.checkpoint_path = Some(self.workdir.join(CHECKPOINT));
        }
        let outcome = train_from_manifest(&input, &config)?;
        let path = self.workdir.join(MODEL);
        save_checkpoint(&outcome.params, None, &path)?;
        if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
            log::info!(
                "train: loss {:.6} -> {:.6} over {} steps; weights in {}",
                first.1,
                last.1,
                last.0,
                path.display()
            );
        }
        Ok(path)
    }

    /// Predicts one output-resolution soft mask per image.
    pub fn infer(&self, input: Option<&Path>, checkpoint: Option<&Path>) -> Result<PathBuf> {
        let input = self.input(input, HELDOUT_MANIFEST)?;
        let checkpoint = self.input(checkpoint, MODEL)?;
        let params = load_checkpoint(&checkpoint)?.params;
        let size = params.arch.input_size;
        let entries = read_manifest(&input)?;
        let out = self.pool.install(|| {
            entries
                .par_iter()
                .map(|e| -> Result<DatasetEntry> {
                    let image = read_image(resolve(&input, &e.image_path))?;
                    let mask = infer(&params, &to_student_channels(&image, size)?)?;
                    let mut out = self.rebase_entry(&input, e);
                    let rel = frame_file("student", &out, "pgm");
                    write_netpbm(self.workdir.join(&rel), &Image::from(mask))?;
                    out.mask_path = Some(rel);
                    out.score = None;
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let path = self.workdir.join(format!("student_{}.jsonl", stem(&input)));
        write_manifest(&out, &path)?;
        log::info!("infer: {} masks -> {}", out.len(), path.display());
        Ok(path)
    }

    /// Fits boxes at frame resolution to every mask of the manifest.
    pub fn boxes(&self, input: Option<&Path>) -> Result<PathBuf> {
        let input = self.input(input, "student_heldout.jsonl")?;
        let entries = read_manifest(&input)?;
        let out = self.pool.install(|| {
            entries
                .par_iter()
                .map(|e| -> Result<DatasetEntry> {
                    let mask = read_mask(resolve(&input, mask_field(e, &input)?))?;
                    let (w, h) = self.frame_size(&input, e)?;
                    let boxes = fit_boxes(&mask, w, h, &self.config.boxes)?;
                    let mut out = self.rebase_entry(&input, e);
                    out.pred_boxes = Some(boxes.iter().map(|b| b.bbox).collect());
                    out.pred_scores = Some(boxes.iter().map(|b| b.score).collect());
                    Ok(out)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let path = self.workdir.join(format!("boxes_{}.jsonl", stem(&input)));
        write_manifest(&out, &path)?;
        log::info!("boxes: {} frames -> {}", out.len(), path.display());
        Ok(path)
    }

    /// Writes `reports/<metric>_<input>.json` (a list of reports) and prints
    /// each report as a table.
    pub fn eval(&self, input: Option<&Path>, metric: Metric) -> Result<(PathBuf, Vec<EvalReport>)> {
        let out = self.eval_quiet(input, metric)?;
        for r in &out.1 {
            println!("{}", r.to_table());
        }
        Ok(out)
    }

    fn eval_quiet(&self, input: Option<&Path>, metric: Metric) -> Result<(PathBuf, Vec<EvalReport>)> {
        let default = match metric {
            Metric::Corloc => "boxes_student_heldout.jsonl",
            Metric::Maxf | Metric::Pixel => "student_heldout.jsonl",
        };
        let input = self.input(input, default)?;
        let entries = read_manifest(&input)?;
        let reports = match metric {
            Metric::Maxf => vec![self.eval_maxf(&input, &entries)?],
            Metric::Corloc => vec![self.eval_corloc(&entries)],
            Metric::Pixel => self.eval_pixel(&input, &entries)?,
        };
        let dir = self.workdir.join(REPORTS);
        fs::create_dir_all(&dir).map_err(runtime)?;
        let path = dir.join(format!("{}_{}.json", metric.name(), stem(&input)));
        let json = serde_json::to_string_pretty(&reports).map_err(runtime)?;
        fs::write(&path, json + "\n").map_err(runtime)?;
        Ok((path, reports))
    }

    /// Masks upsampled to frame size, in manifest order.
    fn frame_masks(&self, input: &Path, entries: &[DatasetEntry]) -> Result<Vec<SoftMask>> {
        self.pool.install(|| {
            entries
                .par_iter()
                .map(|e| {
                    let mask = read_mask(resolve(input, mask_field(e, input)?))?;
                    let (w, h) = self.frame_size(input, e)?;
                    Ok(mask.resize(w, h)?)
                })
                .collect()
        })
    }

    fn eval_maxf(&self, input: &Path, entries: &[DatasetEntry]) -> Result<EvalReport> {
        let masks = self.frame_masks(input, entries)?;
        let mut per_class = BTreeMap::new();
        for (group, idx) in groups(entries) {
            let m: Vec<SoftMask> = idx.iter().map(|&i| masks[i].clone()).collect();
            let gt: Vec<Vec<BoundingBox>> = idx.iter().map(|&i| entries[i].gt_box.into_iter().collect()).collect();
            let f = max_f_measure(&m, &gt)?;
            if f.frames > 0 {
                per_class.insert(
                    group,
                    GroupScore {
                        value: f.value,
                        frames: f.frames,
                    },
                );
            }
        }
        Ok(EvalReport::from_groups(
            "max_f",
            per_class,
            echo(&[
                ("aggregation", "per-frame F averaged at a shared threshold, maximized over thresholds, per group"),
                ("positive_pixels", "value >= t and value > 0, after upsampling to frame size"),
                ("truth", "pixels inside the ground-truth box"),
                ("grouping", "class label, else video id"),
            ]),
        ))
    }

    fn eval_corloc(&self, entries: &[DatasetEntry]) -> EvalReport {
        let mut per_class = BTreeMap::new();
        for (group, idx) in groups(entries) {
            let preds: Vec<Option<Vec<BoundingBox>>> = idx.iter().map(|&i| entries[i].pred_boxes.clone()).collect();
            let gt: Vec<Vec<BoundingBox>> = idx.iter().map(|&i| entries[i].gt_box.into_iter().collect()).collect();
            let c = corloc(&preds, &gt);
            if !c.missing.is_empty() {
                log::warn!("corloc {group}: {} frame(s) without predictions", c.missing.len());
            }
            if c.total > 0 {
                per_class.insert(
                    group,
                    GroupScore {
                        value: c.value(),
                        frames: c.total,
                    },
                );
            }
        }
        EvalReport::from_groups(
            "corloc",
            per_class,
            echo(&[
                ("rule", "first predicted box has IoU >= 0.5 with any ground-truth box"),
                ("grouping", "class label, else video id"),
            ]),
        )
    }

    fn eval_pixel(&self, input: &Path, entries: &[DatasetEntry]) -> Result<Vec<EvalReport>> {
        let rel = self.config.boxes.threshold_rel;
        let scores: Vec<Option<PixelMetrics>> = self.pool.install(|| {
            entries
                .par_iter()
                .map(|e| -> Result<Option<PixelMetrics>> {
                    let Some(gt_path) = &e.gt_mask_path else {
                        return Ok(None);
                    };
                    let truth = read_mask(resolve(input, gt_path))?;
                    let mask = read_mask(resolve(input, mask_field(e, input)?))?;
                    let (_, predicted) = binarize(&mask, truth.width(), truth.height(), rel)?;
                    let truth = BinaryMask::new(
                        truth.width(),
                        truth.height(),
                        truth.data().iter().map(|&v| v > 0).collect(),
                    )?;
                    Ok(Some(pixel_metrics(&predicted, &truth)?))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let fields: [(&str, fn(&PixelMetrics) -> f64); 4] = [
            ("pixel_accuracy", |m| m.accuracy),
            ("pixel_precision", |m| m.precision),
            ("pixel_recall", |m| m.recall),
            ("jaccard", |m| m.jaccard),
        ];
        let threshold = format!("{rel} x mask maximum, after upsampling to frame size");
        let config = echo(&[
            ("threshold", threshold.as_str()),
            ("p_convention", "P is reported as both pixel accuracy and pixel precision"),
            ("grouping", "class label, else video id"),
        ]);
        let groups = groups(entries);
        Ok(fields
            .iter()
            .map(|(name, get)| {
                let mut per_class = BTreeMap::new();
                for (group, idx) in &groups {
                    let vals: Vec<f64> = idx.iter().filter_map(|&i| scores[i].as_ref()).map(get).collect();
                    if !vals.is_empty() {
                        per_class.insert(
                            group.clone(),
                            GroupScore {
                                value: vals.iter().sum::<f64>() / vals.len() as f64,
                                frames: vals.len(),
                            },
                        );
                    }
                }
                EvalReport::from_groups(*name, per_class, config.clone())
            })
            .collect())
    }

    /// Every stage in order, then teacher and student scored on the
    /// held-out videos. Returns `metric -> {teacher, student}`.
    pub fn pipeline(&self) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
        let (train, heldout) = self.synth()?;
        let taught = self.teach(&[train, heldout.clone()])?;
        let selected = self.select(Some(&taught[0]))?;
        let augmented = self.augment(Some(&selected))?;
        let model = self.train(Some(&augmented))?;
        let student = self.infer(Some(&heldout), Some(&model))?;
        let mut summary: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (who, masks) in [("teacher", &taught[1]), ("student", &student)] {
            let boxes = self.boxes(Some(masks))?;
            let mut reports = self.eval_quiet(Some(masks), Metric::Maxf)?.1;
            reports.extend(self.eval_quiet(Some(&boxes), Metric::Corloc)?.1);
            reports.extend(self.eval_quiet(Some(masks), Metric::Pixel)?.1);
            for r in reports {
                summary.entry(r.metric).or_default().insert(who.to_string(), r.mean);
            }
        }
        let path = self.workdir.join(REPORTS).join("summary.json");
        let json = serde_json::to_string_pretty(&summary).map_err(runtime)?;
        fs::write(&path, json + "\n").map_err(runtime)?;
        println!("{:<16}  {:>8}  {:>8}", "held-out", "teacher", "student");
        for (metric, v) in &summary {
            println!("{metric:<16}  {:>8.4}  {:>8.4}", v["teacher"], v["student"]);
        }
        Ok(summary)
    }
}

fn echo(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}
