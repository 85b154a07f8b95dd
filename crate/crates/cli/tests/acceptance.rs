//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any fails. Pass criterion numbers (`3 6`) to run a
//! subset.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use usfg_core::dataset::{read_manifest, score_mask, select_top, write_manifest};
use usfg_core::evaluation::{corloc, iou, max_f_measure, pixel_metrics};
use usfg_core::imagery::{decode_netpbm, encode_netpbm, to_student_channels, Image, SoftMask};
use usfg_core::postprocess::{binarize, BinaryMask, BoundingBox};
use usfg_core::student::layers::{
    concat_backward, concat_forward, conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, resize_backward, resize_forward,
};
use usfg_core::student::{
    decode_checkpoint, encode_checkpoint, forward, infer, loss, loss_and_grad, train, AdamState, Architecture,
    NetworkParams, Preset, Tensor, TrainConfig, TrainSample,
};
use usfg_core::synthvideo::{corrupt_masks, generate};
use usfg_core::teacher::{discover, PcaModel};
use usfg_core::{DatasetEntry, SynthConfig, TeacherConfig};

struct Outcome {
    pass: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Self {
            pass: true,
            summary: String::new(),
            details: Vec::new(),
        }
    }

    /// Records one condition; the criterion passes only if all do.
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        self.pass &= ok;
        self.details.push(format!("{} {what}", if ok { "ok  " } else { "FAIL" }));
    }

    fn runtime(&mut self, start: Instant, limit_s: f64) {
        let t = start.elapsed().as_secs_f64();
        self.check(t < limit_s, format!("runtime {t:.1} s < {limit_s} s"));
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn usfg(args: &[&str]) -> i32 {
    usfg_cli::run(std::iter::once("usfg").chain(args.iter().copied()))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn random_box(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BoundingBox {
    let x0 = rng.random_range(0..w);
    let y0 = rng.random_range(0..h);
    let x1 = rng.random_range(x0 + 1..=w);
    let y1 = rng.random_range(y0 + 1..=h);
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

fn inside(b: &BoundingBox, x: u32, y: u32) -> bool {
    x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1
}

/// IoU by counting pixels over the joint bounding region.
fn brute_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (mut inter, mut union) = (0u64, 0u64);
    for y in a.y0.min(b.y0)..a.y1.max(b.y1) {
        for x in a.x0.min(b.x0)..a.x1.max(b.x1) {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

// ---------------------------------------------------------------------------
// 1. Numerics oracles

/// Largest principal angle between the spans of two orthonormal bases,
/// from the spectral norm of the residual of projecting one onto the other.
fn max_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let residual = a - b * (b.transpose() * a);
    let s = residual.svd(false, false).singular_values.max();
    s.min(1.0).asin()
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xac1);

    // PCA against a dense covariance eigendecomposition.
    let (f, d) = (50, 300);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for _ in 0..10 {
        let latent = 20;
        let mix: Vec<f64> = (0..d * latent).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale: Vec<f64> = (0..latent).map(|j| 3.0 / (1.0 + j as f64)).collect();
        let data: Vec<Vec<f64>> = (0..f)
            .map(|_| {
                let z: Vec<f64> = scale.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect();
                (0..d)
                    .map(|i| (0..latent).map(|j| mix[i * latent + j] * z[j]).sum::<f64>() + 0.05 * rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let x = DMatrix::from_fn(d, f, |i, j| data[j][i]);
        let mean = x.column_mean();
        let centered = DMatrix::from_fn(d, f, |i, j| x[(i, j)] - mean[i]);
        let cov = &centered * centered.transpose() / f as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        for k in [1, 3, 8] {
            let model = PcaModel::fit_vectors(&data, k, 1000).unwrap();
            let ours = DMatrix::from_fn(d, k, |i, j| model.components[j][i]);
            let oracle = DMatrix::from_fn(d, k, |i, j| eig.eigenvectors[(i, order[j])]);
            worst = worst.max(max_principal_angle(&ours, &oracle));
            instances += 1;
        }
    }
    out.check(
        worst < 1e-6,
        format!("PCA: worst principal angle {worst:.2e} rad < 1e-6 over {instances} fits of 50x300 data"),
    );

    // IoU.
    let mut mismatches = 0;
    for _ in 0..1000 {
        let a = random_box(&mut rng, 64, 64);
        let b = random_box(&mut rng, 64, 64);
        mismatches += (iou(&a, &b) != brute_iou(&a, &b)) as usize;
    }
    out.check(mismatches == 0, format!("iou: {mismatches} mismatches in 1000 random box pairs (exact)"));

    // Pixel metrics.
    let mut mismatches = 0;
    for _ in 0..200 {
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let (dp, dt) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p: Vec<bool> = (0..w * h).map(|_| rng.random_bool(dp)).collect();
        let t: Vec<bool> = (0..w * h).map(|_| rng.random_bool(dt)).collect();
        let got = pixel_metrics(&BinaryMask::new(w, h, p.clone()).unwrap(), &BinaryMask::new(w, h, t.clone()).unwrap())
            .unwrap();
        let (mut tp, mut fp, mut fneg, mut agree) = (0usize, 0usize, 0usize, 0usize);
        for (&a, &b) in p.iter().zip(&t) {
            tp += (a && b) as usize;
            fp += (a && !b) as usize;
            fneg += (!a && b) as usize;
            agree += (a == b) as usize;
        }
        let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let want = [
            frac(agree, w * h),
            frac(tp, tp + fp),
            frac(tp, tp + fneg),
            frac(tp, tp + fp + fneg),
        ];
        mismatches += ([got.accuracy, got.precision, got.recall, got.jaccard] != want) as usize;
    }
    out.check(mismatches == 0, format!("pixel metrics: {mismatches} mismatches in 200 random mask pairs (exact)"));

    // Max F-measure.
    let mut worst = 0.0f64;
    for _ in 0..150 {
        let (w, h) = (rng.random_range(1..=64u32), rng.random_range(1..=64u32));
        let frames = rng.random_range(1..=4);
        let mut masks = Vec::new();
        let mut boxes = Vec::new();
        for _ in 0..frames {
            let zero_frac = rng.random_range(0.0..1.0);
            let data: Vec<u8> = (0..w * h)
                .map(|_| if rng.random_bool(zero_frac) { 0 } else { rng.random() })
                .collect();
            masks.push(SoftMask::new(w as usize, h as usize, data).unwrap());
            let n = rng.random_range(0..=2);
            boxes.push((0..n).map(|_| random_box(&mut rng, w, h)).collect::<Vec<_>>());
        }
        let got = max_f_measure(&masks, &boxes).unwrap().value;
        // Naive: thresholds, then frames, then pixels.
        let mut best = 0.0f64;
        let evaluable = boxes.iter().filter(|b| !b.is_empty()).count();
        for t in 0..=255u32 {
            let mut total = 0.0;
            for (m, bs) in masks.iter().zip(&boxes) {
                if bs.is_empty() {
                    continue;
                }
                let (mut tp, mut pred, mut pos) = (0u64, 0u64, 0u64);
                for y in 0..h {
                    for x in 0..w {
                        let v = m.get(x as usize, y as usize) as u32;
                        let p = v >= t && v > 0;
                        let g = bs.iter().any(|b| inside(b, x, y));
                        tp += (p && g) as u64;
                        pred += p as u64;
                        pos += g as u64;
                    }
                }
                if tp > 0 {
                    let (pr, rc) = (tp as f64 / pred as f64, tp as f64 / pos as f64);
                    total += 2.0 * pr * rc / (pr + rc);
                }
            }
            if evaluable > 0 {
                best = best.max(total / evaluable as f64);
            }
        }
        worst = worst.max((got - best).abs());
    }
    out.check(worst <= 1e-12, format!("max F: worst deviation {worst:.1e} <= 1e-12 over 150 fixtures"));

    // CorLoc.
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let gt: Vec<Vec<BoundingBox>> = (0..n)
            .map(|_| (0..rng.random_range(0..=2)).map(|_| random_box(&mut rng, 32, 32)).collect())
            .collect();
        let preds: Vec<Option<Vec<BoundingBox>>> = (0..rng.random_range(0..=n))
            .map(|_| {
                if rng.random_bool(0.1) {
                    None
                } else {
                    Some((0..rng.random_range(0..=3)).map(|_| random_box(&mut rng, 32, 32)).collect())
                }
            })
            .collect();
        let got = corloc(&preds, &gt);
        let (mut hit, mut total) = (0, 0);
        for (i, g) in gt.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            total += 1;
            if let Some(Some(p)) = preds.get(i) {
                if let Some(first) = p.first() {
                    hit += g.iter().any(|b| brute_iou(first, b) >= 0.5) as usize;
                }
            }
        }
        mismatches += ((got.localized, got.total) != (hit, total)) as usize;
    }
    out.check(mismatches == 0, format!("corloc: {mismatches} mismatches in 200 fixtures (exact)"));
    out.runtime(start, 60.0);
    out.summary = "numerics oracles (PCA, IoU, pixel metrics, max F, CorLoc)".into();
    out
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness

const STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn weighted(out: &[f64], r: &[f64]) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Worst relative error between `analytic` and central differences of `f`
/// over every coordinate of `x`.
fn fd_worst(x: &mut [f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(x);
        x[i] = orig - STEP;
        let down = f(x);
        x[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

fn ac2() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xac2);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let checked;

    // Convolution: input, weight and bias.
    {
        let (ci, co, h, w, k) = (3, 4, 6, 7, 3);
        let mut x = rand_vec(&mut rng, ci * h * w);
        let mut wt = rand_vec(&mut rng, co * ci * k * k);
        let mut b = rand_vec(&mut rng, co);
        let r = rand_vec(&mut rng, co * h * w);
        let (mut gw, mut gb, mut gx) = (vec![0.0; wt.len()], vec![0.0; co], vec![0.0; x.len()]);
        conv2d_backward(&x, ci, h, w, &wt, co, k, &r, &mut gw, &mut gb, Some(&mut gx));
        let run = |x: &[f64], wt: &[f64], b: &[f64]| {
            let mut o = vec![0.0; co * h * w];
            conv2d_forward(x, ci, h, w, wt, b, co, k, &mut o);
            weighted(&o, &r)
        };
        let (wc, bc, xc) = (wt.clone(), b.clone(), x.clone());
        let e = fd_worst(&mut x, &gx, |x| run(x, &wc, &bc))
            .max(fd_worst(&mut wt, &gw, |wt| run(&xc, wt, &bc)))
            .max(fd_worst(&mut b, &gb, |b| run(&xc, &wc, b)));
        worst.insert("conv", e);
    }
    // ReLU, away from the kink.
    {
        let mut x: Vec<f64> = rand_vec(&mut rng, 40).into_iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect();
        let r = rand_vec(&mut rng, 40);
        let mut act = x.clone();
        relu_forward(&mut act);
        let mut g = r.clone();
        relu_backward(&act, &mut g);
        let e = fd_worst(&mut x, &g, |x| {
            let mut a = x.to_vec();
            relu_forward(&mut a);
            weighted(&a, &r)
        });
        worst.insert("relu", e);
    }
    // Max pooling with distinct values.
    {
        let (c, h, w) = (2, 6, 8);
        let mut x: Vec<f64> = (0..c * h * w).map(|i| i as f64 * 0.01).collect();
        for i in (1..x.len()).rev() {
            x.swap(i, rng.random_range(0..=i));
        }
        let r = rand_vec(&mut rng, c * (h / 2) * (w / 2));
        let mut o = vec![0.0; r.len()];
        let mut arg = vec![0u32; r.len()];
        maxpool2_forward(&x, c, h, w, &mut o, &mut arg);
        let mut g = vec![0.0; x.len()];
        maxpool2_backward(&r, &arg, &mut g);
        let e = fd_worst(&mut x, &g, |x| {
            let mut o = vec![0.0; r.len()];
            let mut arg = vec![0u32; r.len()];
            maxpool2_forward(x, c, h, w, &mut o, &mut arg);
            weighted(&o, &r)
        });
        worst.insert("maxpool", e);
    }
    // Bilinear resize, down and up.
    {
        let mut e = 0.0f64;
        for (c, h, w, oh, ow) in [(2, 8, 8, 4, 4), (3, 4, 5, 7, 9)] {
            let mut x = rand_vec(&mut rng, c * h * w);
            let r = rand_vec(&mut rng, c * oh * ow);
            let mut g = vec![0.0; x.len()];
            resize_backward(&r, c, h, w, oh, ow, &mut g);
            e = e.max(fd_worst(&mut x, &g, |x| {
                let mut o = vec![0.0; c * oh * ow];
                resize_forward(x, c, h, w, oh, ow, &mut o);
                weighted(&o, &r)
            }));
        }
        worst.insert("resize", e);
    }
    // Concatenation.
    {
        let mut a = rand_vec(&mut rng, 5);
        let mut b = rand_vec(&mut rng, 7);
        let r = rand_vec(&mut rng, 12);
        let (mut ga, mut gb) = (vec![0.0; 5], vec![0.0; 7]);
        concat_backward(&r, &mut [&mut ga[..], &mut gb[..]]);
        let (ac, bc) = (a.clone(), b.clone());
        let run = |a: &[f64], b: &[f64]| {
            let mut o = vec![0.0; 12];
            concat_forward(&[a, b], &mut o);
            weighted(&o, &r)
        };
        let e = fd_worst(&mut a, &ga, |a| run(a, &bc)).max(fd_worst(&mut b, &gb, |b| run(&ac, b)));
        worst.insert("concat", e);
    }
    // Fully connected, batch of 3.
    {
        let (n_in, n_out, batch) = (13, 5, 3);
        let mut wt = rand_vec(&mut rng, n_in * n_out);
        let mut b = rand_vec(&mut rng, n_out);
        let mut x = rand_vec(&mut rng, batch * n_in);
        let r = rand_vec(&mut rng, batch * n_out);
        let (mut gw, mut gb, mut gx) = (vec![0.0; wt.len()], vec![0.0; n_out], vec![0.0; x.len()]);
        let all = [0..n_in];
        fc_backward(&wt, n_in, n_out, &x, &r, &mut gw, &mut gb, Some((&mut gx, &all)));
        let run = |wt: &[f64], b: &[f64], x: &[f64]| {
            let mut y = vec![0.0; batch * n_out];
            fc_forward(wt, b, n_in, n_out, x, &mut y);
            weighted(&y, &r)
        };
        let (wc, bc, xc) = (wt.clone(), b.clone(), x.clone());
        let e = fd_worst(&mut wt, &gw, |wt| run(wt, &bc, &xc))
            .max(fd_worst(&mut b, &gb, |b| run(&wc, b, &xc)))
            .max(fd_worst(&mut x, &gx, |x| run(&wc, &bc, x)));
        worst.insert("fc", e);
    }
    // End to end on the tiny network: every parameter.
    {
        let arch = Preset::Tiny.architecture();
        let mut params = NetworkParams::<f64>::init(&arch, &mut rng).unwrap();
        for t in params.tensors_mut() {
            if t.dims().len() == 1 {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        let batch = 2;
        let s = arch.input_size;
        let input = Tensor::from_vec(
            &[batch, arch.in_channels, s, s],
            (0..batch * arch.in_channels * s * s).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let targets: Vec<f64> = (0..batch * arch.output_len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, grads) = loss_and_grad(&params, &input, &targets).unwrap();
        let f = |p: &NetworkParams<f64>| {
            let acts = forward(p, &input).unwrap();
            loss(&acts.output, &targets, batch)
        };
        let mut e = 0.0f64;
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            let analytic = grads.tensors()[ti].1.data().to_vec();
            for i in 0..analytic.len() {
                let orig = params.tensors_mut()[ti].data()[i];
                params.tensors_mut()[ti].data_mut()[i] = orig + STEP;
                let up = f(&params);
                params.tensors_mut()[ti].data_mut()[i] = orig - STEP;
                let down = f(&params);
                params.tensors_mut()[ti].data_mut()[i] = orig;
                e = e.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
            }
        }
        worst.insert("tiny network end to end", e);
        checked = params.param_count();
    }
    for (layer, e) in &worst {
        out.check(*e < 1e-5, format!("{layer}: worst relative error {e:.2e} < 1e-5"));
    }
    out.details.push(format!("     tiny network: all {checked} parameters checked"));
    out.runtime(start, 120.0);
    out.summary = "finite-difference gradients, every layer type and the tiny network (f64)".into();
    out
}

// ---------------------------------------------------------------------------
// 3. Trainability

fn ac3() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let video = generate(&SynthConfig {
        train_videos: 1,
        heldout_videos: 0,
        still_fraction: 0.0,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
    .remove(0);
    let sample = TrainSample {
        image: video.frames[0].clone(),
        target: video.gt_masks[0].resize(32, 32).unwrap(),
    };
    let config = TrainConfig {
        preset: Preset::Desk,
        batch: 1,
        steps: 501,
        seed: 0,
        ..Default::default()
    };
    let outcome = train(&[sample], &config).unwrap();
    // losses[i] is measured before update i + 1, so index 500 is the loss
    // after 500 Adam steps.
    let initial = outcome.losses[0].1;
    let after = outcome.losses[500].1;
    let first_below = outcome.losses.iter().find(|(_, l)| *l < 1e-3 * initial).map(|(s, _)| s - 1);
    out.check(
        after < 1e-3 * initial,
        format!(
            "desk preset, one example: loss {initial:.4} -> {after:.3e} after 500 steps (ratio {:.2e} < 1e-3; first below after {} steps)",
            after / initial,
            first_below.map_or("never".into(), |s| s.to_string())
        ),
    );
    out.runtime(start, 180.0);
    out.summary = "single-example overfit on the desk preset".into();
    out
}

// ---------------------------------------------------------------------------
// 4. Student against teacher, end to end through the CLI

fn ac4() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let dir = tempfile::tempdir().unwrap();
    let config = repo_root().join("configs/acceptance.cfg");
    let code = usfg(&[
        "--config",
        config.to_str().unwrap(),
        "--workdir",
        dir.path().to_str().unwrap(),
        "pipeline",
    ]);
    out.check(code == 0, format!("pipeline exit code {code}"));
    if code == 0 {
        let text = fs::read_to_string(dir.path().join("reports/summary.json")).unwrap();
        let summary: BTreeMap<String, BTreeMap<String, f64>> = serde_json::from_str(&text).unwrap();
        let (teacher, student) = (summary["max_f"]["teacher"], summary["max_f"]["student"]);
        out.check(teacher >= 0.70, format!("teacher held-out mean max F {teacher:.4} >= 0.70"));
        out.check(
            student >= teacher - 0.05,
            format!("student {student:.4} >= teacher - 0.05 = {:.4}", teacher - 0.05),
        );
        out.check(student > teacher, format!("student {student:.4} > teacher {teacher:.4} (calibrated suite)"));
        for metric in ["corloc", "jaccard", "pixel_accuracy"] {
            out.details.push(format!(
                "     {metric}: teacher {:.4}, student {:.4}",
                summary[metric]["teacher"], summary[metric]["student"]
            ));
        }
    }
    out.runtime(start, 900.0);
    out.summary = "student trained on selected teacher masks matches or beats the teacher".into();
    out
}

// ---------------------------------------------------------------------------
// 5. Selection purity

fn ac5() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let synth = SynthConfig {
        heldout_videos: 0,
        seed: 5,
        ..Default::default()
    };
    let videos = generate(&synth).unwrap();
    let teacher = TeacherConfig::default();
    let mut masks = Vec::new();
    let mut truth = Vec::new();
    let mut entries = Vec::new();
    for v in &videos {
        let found = discover(&v.frames, &teacher).unwrap();
        for (i, m) in found.masks.into_iter().enumerate() {
            entries.push(DatasetEntry::new(&v.video_id, i as u32, ""));
            masks.push(m);
            truth.push(v.gt_masks[i].clone());
        }
    }
    let (masks, replaced) = corrupt_masks(&masks, 0.5, &mut ChaCha8Rng::seed_from_u64(55)).unwrap();
    // IoU of the binarized, upsampled mask with the ground-truth support,
    // counted pixel by pixel.
    let ious: Vec<f64> = masks
        .iter()
        .zip(&truth)
        .map(|(m, gt)| {
            let (_, bin) = binarize(m, gt.width(), gt.height(), 0.5).unwrap();
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &g) in bin.data().iter().zip(gt.data()) {
                inter += (p && g > 0) as usize;
                union += (p || g > 0) as usize;
            }
            if union == 0 {
                0.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    for (e, m) in entries.iter_mut().zip(&masks) {
        e.score = Some(score_mask(m));
    }
    let index: BTreeMap<(String, u32), usize> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.video_id.clone(), e.frame_index), i))
        .collect();
    let top = select_top(&entries, 0.10).unwrap();
    let full_mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let top_mean = top.iter().map(|e| ious[index[&(e.video_id.clone(), e.frame_index)]]).sum::<f64>() / top.len() as f64;
    let replaced: HashSet<usize> = replaced.into_iter().collect();
    let corrupted_kept = top
        .iter()
        .filter(|e| replaced.contains(&index[&(e.video_id.clone(), e.frame_index)]))
        .count();
    out.check(
        top_mean > full_mean,
        format!(
            "top 10% mean IoU {top_mean:.4} > full-set mean {full_mean:.4} ({} of {} masks corrupted; {corrupted_kept} corrupted among {} kept)",
            replaced.len(),
            masks.len(),
            top.len()
        ),
    );
    out.runtime(start, 60.0);
    out.summary = "selection purity with half the masks corrupted".into();
    out
}

// ---------------------------------------------------------------------------
// 6. Performance gates

fn ac6() -> Outcome {
    let mut out = Outcome::new();
    let videos = generate(&SynthConfig {
        train_videos: 9,
        heldout_videos: 0,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    let teacher = TeacherConfig::default();
    let mut fps = Vec::new();
    let mut frames = 0;
    for v in &videos {
        let t = Instant::now();
        let found = discover(&v.frames, &teacher).unwrap();
        fps.push(v.frames.len() as f64 / t.elapsed().as_secs_f64());
        frames += found.masks.len();
    }
    let teacher_fps = median(fps);
    out.check(
        teacher_fps >= 30.0,
        format!("teacher: median {teacher_fps:.0} fps >= 30 at 64x64 work resolution, single thread ({frames} frames, per-video rates)"),
    );

    let arch = Preset::Desk.architecture();
    let params = NetworkParams::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let images: Vec<&Image> = videos.iter().flat_map(|v| &v.frames).take(500).collect();
    // Warm the caches and the page tables once.
    infer(&params, &to_student_channels(images[0], arch.input_size).unwrap()).unwrap();
    let times: Vec<f64> = images
        .iter()
        .map(|img| {
            let t = Instant::now();
            let stack = to_student_channels(img, arch.input_size).unwrap();
            infer(&params, &stack).unwrap();
            t.elapsed().as_secs_f64()
        })
        .collect();
    let n = times.len();
    let per_image = median(times);
    out.check(
        per_image <= 0.04,
        format!("student: median {per_image:.4} s/image <= 0.04 (desk preset, {n} frames, channels + network)"),
    );
    out.summary = "teacher throughput and student latency".into();
    out
}

// ---------------------------------------------------------------------------
// 7. Determinism

/// Relative path -> SHA-256 of every file under `root`.
fn digest_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let digest = Sha256::digest(fs::read(&path).unwrap()).to_vec();
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), digest);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn ac7() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let dir = tempfile::tempdir().unwrap();
    let config = repo_root().join("configs/desk.cfg");
    let run = |name: &str, workers: &str| {
        let workdir = dir.path().join(name);
        let code = usfg(&[
            "--config",
            config.to_str().unwrap(),
            "--workdir",
            workdir.to_str().unwrap(),
            "--seed",
            "11",
            "--workers",
            workers,
            "--synth.train_videos",
            "4",
            "--synth.heldout_videos",
            "2",
            "--synth.frames",
            "20",
            "--select.keep_fraction",
            "0.25",
            "--train.steps",
            "4",
            "--train.batch",
            "4",
            "pipeline",
        ]);
        (code, digest_tree(&workdir))
    };
    let (ca, a) = run("a", "1");
    let (cb, b) = run("b", "1");
    let (cc, c) = run("c", "3");
    out.check([ca, cb, cc] == [0, 0, 0], format!("exit codes {ca}, {cb}, {cc}"));
    let kinds = |t: &BTreeMap<PathBuf, Vec<u8>>, prefix: &str| t.keys().filter(|k| k.starts_with(prefix)).count();
    out.details.push(format!(
        "     compared {} files: {} teacher masks, {} student masks, {} reports, model and loss log",
        a.len(),
        kinds(&a, "teacher"),
        kinds(&a, "student"),
        kinds(&a, "reports")
    ));
    let differing = |x: &BTreeMap<PathBuf, Vec<u8>>, y: &BTreeMap<PathBuf, Vec<u8>>| {
        x.keys()
            .chain(y.keys())
            .filter(|k| x.get(*k) != y.get(*k))
            .collect::<HashSet<_>>()
            .len()
    };
    let same_seed = differing(&a, &b);
    let workers = differing(&a, &c);
    out.check(
        same_seed == 0 && a.contains_key(Path::new("model.usfg")),
        format!("same seed twice: {same_seed} differing files"),
    );
    out.check(workers == 0, format!("--workers 1 vs 3: {workers} differing files"));
    out.details.push(format!("     runtime {:.1} s", start.elapsed().as_secs_f64()));
    out.summary = "bit-identical pipeline outputs across runs and worker counts".into();
    out
}

// ---------------------------------------------------------------------------
// 8. Format round trips

fn ac8() -> Outcome {
    let start = Instant::now();
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xac8);

    let mut bad = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..=40), rng.random_range(1..=40));
        let channels = if rng.random_bool(0.5) { 1 } else { 3 };
        let mut data = vec![0u8; w * h * channels];
        rng.fill_bytes(&mut data);
        let image = Image::new(w, h, channels, data).unwrap();
        bad += (decode_netpbm(&encode_netpbm(&image)).ok() != Some(image)) as usize;
    }
    out.check(bad == 0, format!("netpbm: {bad} of 1000 random P5/P6 images changed"));

    let dir = tempfile::tempdir().unwrap();
    let mut bad = 0;
    let mut order_broken = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=6);
        let base: f64 = rng.random_range(0.0..255.0);
        let entries: Vec<DatasetEntry> = (0..n)
            .map(|i| {
                let mut e = DatasetEntry::new(
                    format!("v{}-ü{}", rng.random_range(0..3), rng.random::<u16>()),
                    i as u32 * 7 + rng.random_range(0..7),
                    format!("frames/{case}/{i}.ppm"),
                );
                // Scores a few ulps apart.
                e.score = Some(f64::from_bits(base.to_bits() + rng.random_range(0..4)));
                if rng.random_bool(0.5) {
                    e.mask_path = Some(format!("masks/{case}/{i}.pgm"));
                }
                if rng.random_bool(0.5) {
                    e.gt_box = Some(random_box(&mut rng, 128, 128));
                    e.gt_mask_path = Some(format!("gt/{case}/{i}.pgm"));
                }
                if rng.random_bool(0.3) {
                    e.pred_boxes = Some(vec![random_box(&mut rng, 128, 128)]);
                    e.pred_scores = Some(vec![rng.random_range(0.0..255.0)]);
                }
                if rng.random_bool(0.3) {
                    e.extra.insert("note".into(), serde_json::json!({"k": [1, 2.5, "x"], "case": case}));
                }
                e
            })
            .collect();
        let path = dir.path().join(format!("{case}.jsonl"));
        write_manifest(&entries, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        bad += (back != entries) as usize;
        let sorted = |es: &[DatasetEntry]| select_top(es, 1.0).unwrap();
        order_broken += (sorted(&back) != sorted(&entries)) as usize;
    }
    out.check(bad == 0, format!("manifest: {bad} of 1000 random manifests changed"));
    out.check(order_broken == 0, format!("manifest: score order changed in {order_broken} of 1000 near-tie cases"));

    let mut bad = 0;
    for _ in 0..1000 {
        let widths = [0; 7].map(|_| rng.random_range(1..=4));
        let arch = Architecture::new(4 * rng.random_range(1..=3), widths).unwrap();
        let mut params = NetworkParams::<f32>::zeros(&arch).unwrap();
        let finite = |rng: &mut ChaCha8Rng| loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        };
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = finite(&mut rng);
            }
        }
        let adam = rng.random_bool(0.5).then(|| {
            let mut s = AdamState::new(&params);
            s.t = rng.random_range(0..1 << 24);
            for t in s.m.iter_mut().chain(s.v.iter_mut()) {
                for v in t.data_mut() {
                    *v = finite(&mut rng);
                }
            }
            s
        });
        let bytes = encode_checkpoint(&params, adam.as_ref()).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        let bits = |p: &NetworkParams<f32>| -> Vec<u32> {
            p.tensors().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        let moments = |s: &AdamState<f32>| -> (u64, Vec<u32>) {
            (s.t, s.m.iter().chain(&s.v).flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect())
        };
        let same = back.params.arch == arch
            && bits(&back.params) == bits(&params)
            && back.adam.as_ref().map(moments) == adam.as_ref().map(moments);
        bad += !same as usize;
    }
    out.check(bad == 0, format!("checkpoint: {bad} of 1000 random checkpoints changed (bit-exact)"));
    out.details.push(format!("     runtime {:.1} s", start.elapsed().as_secs_f64()));
    out.summary = "Netpbm, manifest and checkpoint round trips".into();
    out
}

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.trim_start_matches("ac").parse().ok())
        .collect();
    let criteria: [(usize, fn() -> Outcome); 8] = [
        (1, ac1),
        (2, ac2),
        (3, ac3),
        (4, ac4),
        (5, ac5),
        (6, ac6),
        (7, ac7),
        (8, ac8),
    ];
    let mut failed = Vec::new();
    for (n, criterion) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let outcome = criterion();
        println!(
            "[{}] AC{n} {}",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.summary
        );
        for d in &outcome.details {
            println!("       {d}");
        }
        if !outcome.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
