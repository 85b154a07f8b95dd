//! Video foreground discovery with a PCA background model.
//!
//! Frames are downscaled to a working resolution and flattened. The top
//! principal components of the video explain the background; what they
//! cannot reconstruct is foreground evidence. That evidence, normalized
//! over the whole video, seeds foreground/background color histograms whose
//! per-pixel posterior is combined with the evidence into a soft mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagery::{Image, SoftMask};
use crate::linalg::{dot, jacobi_eigen, orthonormalize};

pub const COLOR_BINS: usize = 512;

/// Below this, a video-wide maximum error is treated as no signal.
const MIN_SIGNAL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    /// `sqrt(error · 255·posterior)`
    GeometricMean,
    ArithmeticMean,
    ErrorOnly,
    PosteriorOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub work_w: usize,
    pub work_h: usize,
    pub components: usize,
    pub max_fit_frames: usize,
    pub sigma: f64,
    /// Top percentage of video-wide error that seeds the foreground.
    pub fg_seed_percent: f64,
    /// Bottom percentage of video-wide error that seeds the background.
    pub bg_seed_percent: f64,
    pub refine_iters: usize,
    pub combine: CombineMode,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            work_w: 64,
            work_h: 64,
            components: 8,
            max_fit_frames: 1000,
            sigma: 2.0,
            fg_seed_percent: 15.0,
            bg_seed_percent: 50.0,
            refine_iters: 2,
            combine: CombineMode::GeometricMean,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let pct = |p: f64| p > 0.0 && p < 100.0;
        if self.work_w == 0 || self.work_h == 0 {
            return Err(Error::Config("teacher work resolution must be positive".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("teacher needs at least one component".into()));
        }
        if self.max_fit_frames < 2 {
            return Err(Error::Config("max_fit_frames must be at least 2".into()));
        }
        if !pct(self.fg_seed_percent) || !pct(self.bg_seed_percent) {
            return Err(Error::Config("seed percentiles must lie in (0, 100)".into()));
        }
        if self.fg_seed_percent + self.bg_seed_percent > 100.0 {
            return Err(Error::Config("foreground and background seeds overlap".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean and orthonormal principal directions of flattened frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub work_w: usize,
    pub work_h: usize,
    pub mean: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues, non-increasing, one per fitted frame.
    pub eigenvalues: Vec<f64>,
    pub requested: usize,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn is_reduced(&self) -> bool {
        self.k() < self.requested
    }

    /// Fits on raw vectors, evenly subsampled to at most `max_fit` of them.
    pub fn fit_vectors(data: &[Vec<f64>], k: usize, max_fit: usize) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::argument("PCA needs at least two samples"));
        }
        let d = data[0].len();
        if data.iter().any(|v| v.len() != d) {
            return Err(Error::argument("PCA samples differ in length"));
        }
        let fit: Vec<&Vec<f64>> = if data.len() > max_fit {
            (0..max_fit).map(|i| &data[i * data.len() / max_fit]).collect()
        } else {
            data.iter().collect()
        };
        let f = fit.len();
        let mut mean = vec![0.0; d];
        for v in &fit {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= f as f64);
        let centered: Vec<Vec<f64>> = fit
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
            .collect();

        // F×F Gram matrix instead of the D×D covariance.
        let mut gram = vec![0.0; f * f];
        for i in 0..f {
            for j in i..f {
                let g = dot(&centered[i], &centered[j]);
                gram[i * f + j] = g;
                gram[j * f + i] = g;
            }
        }
        let eig = jacobi_eigen(&gram, f);
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        let floor = (top * 1e-10).max(1e-20);
        let mut components = Vec::with_capacity(k);
        for (lambda, u) in eig.values.iter().zip(&eig.vectors).take(k) {
            if *lambda <= floor {
                break;
            }
            let scale = 1.0 / lambda.sqrt();
            let mut v = vec![0.0; d];
            for (c, row) in u.iter().zip(&centered) {
                let w = c * scale;
                for (acc, x) in v.iter_mut().zip(row) {
                    *acc += w * x;
                }
            }
            components.push(v);
        }
        orthonormalize(&mut components);
        if components.len() < k {
            log::warn!(
                "PCA rank {} below requested {k} components; continuing with reduced k",
                components.len()
            );
        }
        Ok(Self {
            work_w: 0,
            work_h: 0,
            mean,
            components,
            eigenvalues: eig.values.iter().map(|l| l.max(0.0) / f as f64).collect(),
            requested: k,
        })
    }

    /// Residual `x − mean − Σ cᵢVᵢ`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let coeffs: Vec<f64> = self.components.iter().map(|v| dot(&r, v)).collect();
        for (c, v) in coeffs.iter().zip(&self.components) {
            for (ri, vi) in r.iter_mut().zip(v) {
                *ri -= c * vi;
            }
        }
        r
    }
}

/// Downscales to the working resolution; samples in `[0, 1]`, RGB interleaved.
pub fn work_vector(frame: &Image, work_w: usize, work_h: usize) -> Result<Vec<f64>> {
    let small = to_work_image(frame, work_w, work_h)?;
    Ok(small.data().iter().map(|&v| v as f64 / 255.0).collect())
}

fn to_work_image(frame: &Image, work_w: usize, work_h: usize) -> Result<Image> {
    if frame.channels() != 3 {
        return Err(Error::argument("teacher frames must be RGB"));
    }
    frame.resize(work_w, work_h)
}

pub fn fit_pca(frames: &[Image], config: &TeacherConfig) -> Result<PcaModel> {
    let vectors = frames
        .iter()
        .map(|f| work_vector(f, config.work_w, config.work_h))
        .collect::<Result<Vec<_>>>()?;
    let mut model = PcaModel::fit_vectors(&vectors, config.components, config.max_fit_frames)?;
    model.work_w = config.work_w;
    model.work_h = config.work_h;
    Ok(model)
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_smooth(plane: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * row[clamp(x as isize + j as isize - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * tmp[clamp(y as isize + j as isize - radius, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-pixel RGB norm of the reconstruction residual, smoothed.
pub fn error_map_from_vector(model: &PcaModel, x: &[f64], sigma: f64) -> Vec<f64> {
    let r = model.residual(x);
    let raw: Vec<f64> = r
        .chunks_exact(3)
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .collect();
    gaussian_smooth(&raw, model.work_w, model.work_h, sigma)
}

pub fn error_map(model: &PcaModel, frame: &Image, config: &TeacherConfig) -> Result<Vec<f64>> {
    let x = work_vector(frame, model.work_w, model.work_h)?;
    Ok(error_map_from_vector(model, &x, config.sigma))
}

pub fn color_bin(r: u8, g: u8, b: u8) -> usize {
    ((r as usize >> 5) << 6) | ((g as usize >> 5) << 3) | (b as usize >> 5)
}

/// Foreground/background color likelihoods and the foreground prior.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorModel {
    pub fg_hist: Vec<f64>,
    pub bg_hist: Vec<f64>,
    pub prior_fg: f64,
}

impl ColorModel {
    pub fn from_histograms(fg_hist: Vec<f64>, bg_hist: Vec<f64>, prior_fg: f64) -> Result<Self> {
        if fg_hist.len() != bg_hist.len() || fg_hist.is_empty() {
            return Err(Error::argument("histograms must be non-empty and equal length"));
        }
        if !(prior_fg > 0.0 && prior_fg < 1.0) {
            return Err(Error::argument(format!("prior {prior_fg} outside (0, 1)")));
        }
        Ok(Self {
            fg_hist,
            bg_hist,
            prior_fg,
        })
    }

    /// Laplace-smoothed (+1 per bin) normalized histograms from bin counts.
    pub fn from_counts(fg: &[u64], bg: &[u64], prior_fg: f64) -> Result<Self> {
        let normalize = |counts: &[u64]| {
            let total = counts.iter().sum::<u64>() as f64 + counts.len() as f64;
            counts.iter().map(|&c| (c as f64 + 1.0) / total).collect::<Vec<_>>()
        };
        Self::from_histograms(normalize(fg), normalize(bg), prior_fg)
    }

    pub fn posterior_for_bin(&self, bin: usize) -> f64 {
        let f = self.prior_fg * self.fg_hist[bin];
        let b = (1.0 - self.prior_fg) * self.bg_hist[bin];
        f / (f + b)
    }

    /// Posterior plane for a working-resolution RGB frame.
    pub fn classify(&self, frame: &Image) -> Vec<f64> {
        let table: Vec<f64> = (0..self.fg_hist.len())
            .map(|b| self.posterior_for_bin(b))
            .collect();
        frame
            .data()
            .chunks_exact(3)
            .map(|p| table[color_bin(p[0], p[1], p[2])])
            .collect()
    }
}

pub fn classify_pixels(model: &ColorModel, frame: &Image) -> Vec<f64> {
    model.classify(frame)
}

/// Value at rank `round(p/100 · (n-1))` of the ascending order.
fn percentile(values: &mut [f64], p: f64) -> f64 {
    let idx = ((p / 100.0) * (values.len() - 1) as f64).round() as usize;
    let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.total_cmp(b));
    *v
}

/// Fits color histograms from error-seeded pixels. `frames` are at working
/// resolution; `error_maps` are normalized jointly to `[0, 255]`.
pub fn fit_color_model(
    frames: &[Image],
    error_maps: &[Vec<f64>],
    config: &TeacherConfig,
) -> Result<ColorModel> {
    let mut all: Vec<f64> = error_maps.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::DegenerateVideo("no pixels to seed color models".into()));
    }
    let fg_cut = percentile(&mut all, 100.0 - config.fg_seed_percent);
    let bg_cut = percentile(&mut all, config.bg_seed_percent);
    if fg_cut <= bg_cut {
        return Err(Error::DegenerateVideo(
            "error map has no spread between seed percentiles".into(),
        ));
    }
    let mut fg = vec![0u64; COLOR_BINS];
    let mut bg = vec![0u64; COLOR_BINS];
    for (frame, errors) in frames.iter().zip(error_maps) {
        for (p, &e) in frame.data().chunks_exact(3).zip(errors) {
            let bin = color_bin(p[0], p[1], p[2]);
            if e >= fg_cut {
                fg[bin] += 1;
            } else if e <= bg_cut {
                bg[bin] += 1;
            }
        }
    }
    let n_fg: u64 = fg.iter().sum();
    ColorModel::from_counts(&fg, &bg, n_fg as f64 / all.len() as f64)
}

/// Re-fits from posteriors thresholded at 0.5; `None` if one side is empty.
fn refit_from_posteriors(frames: &[Image], posteriors: &[Vec<f64>]) -> Option<ColorModel> {
    let mut fg = vec![0u64; COLOR_BINS];
    let mut bg = vec![0u64; COLOR_BINS];
    let mut total = 0u64;
    for (frame, post) in frames.iter().zip(posteriors) {
        for (p, &q) in frame.data().chunks_exact(3).zip(post) {
            let bin = color_bin(p[0], p[1], p[2]);
            if q >= 0.5 {
                fg[bin] += 1;
            } else {
                bg[bin] += 1;
            }
            total += 1;
        }
    }
    let n_fg: u64 = fg.iter().sum();
    if n_fg == 0 || n_fg == total {
        return None;
    }
    ColorModel::from_counts(&fg, &bg, n_fg as f64 / total as f64).ok()
}

fn combine(mode: CombineMode, error: f64, posterior: f64) -> f64 {
    let p = 255.0 * posterior;
    match mode {
        CombineMode::GeometricMean => (error * p).sqrt(),
        CombineMode::ArithmeticMean => 0.5 * (error + p),
        CombineMode::ErrorOnly => error,
        CombineMode::PosteriorOnly => p,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discovery {
    /// One working-resolution mask per input frame, in order.
    pub masks: Vec<SoftMask>,
    pub warnings: Vec<String>,
}

impl Discovery {
    fn degenerate(n: usize, config: &TeacherConfig, warning: String) -> Result<Self> {
        log::warn!("{warning}");
        Ok(Self {
            masks: (0..n)
                .map(|_| SoftMask::zeros(config.work_w, config.work_h))
                .collect::<Result<_>>()?,
            warnings: vec![warning],
        })
    }
}

/// Runs the full teacher on one video.
pub fn discover(frames: &[Image], config: &TeacherConfig) -> Result<Discovery> {
    config.validate()?;
    if let Some(first) = frames.first() {
        if frames
            .iter()
            .any(|f| f.width() != first.width() || f.height() != first.height())
        {
            return Err(Error::argument("video frames differ in size"));
        }
    }
    if frames.len() < 2 {
        return Discovery::degenerate(
            frames.len(),
            config,
            format!("video has {} frame(s), need at least 2", frames.len()),
        );
    }
    let (w, h) = (config.work_w, config.work_h);
    let small: Vec<Image> = frames
        .iter()
        .map(|f| to_work_image(f, w, h))
        .collect::<Result<_>>()?;
    let vectors: Vec<Vec<f64>> = small
        .iter()
        .map(|f| f.data().iter().map(|&v| v as f64 / 255.0).collect())
        .collect();
    let mut model = PcaModel::fit_vectors(&vectors, config.components, config.max_fit_frames)?;
    model.work_w = w;
    model.work_h = h;
    let mut warnings = Vec::new();
    if model.is_reduced() {
        warnings.push(format!(
            "PCA rank {} below requested {} components",
            model.k(),
            model.requested
        ));
    }

    let mut errors: Vec<Vec<f64>> = vectors
        .iter()
        .map(|x| error_map_from_vector(&model, x, config.sigma))
        .collect();
    let hi = errors.iter().flatten().copied().fold(0.0, f64::max);
    let lo = errors.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if hi - lo < MIN_SIGNAL {
        let mut d = Discovery::degenerate(frames.len(), config, "static video: no reconstruction error".into())?;
        warnings.append(&mut d.warnings);
        d.warnings = warnings;
        return Ok(d);
    }
    let scale = 255.0 / (hi - lo);
    for e in errors.iter_mut().flatten() {
        *e = (*e - lo) * scale;
    }

    let mut color = match fit_color_model(&small, &errors, config) {
        Ok(c) => c,
        Err(Error::DegenerateVideo(msg)) => {
            let mut d = Discovery::degenerate(frames.len(), config, msg)?;
            warnings.append(&mut d.warnings);
            d.warnings = warnings;
            return Ok(d);
        }
        Err(e) => return Err(e),
    };
    let mut posteriors: Vec<Vec<f64>> = small.iter().map(|f| color.classify(f)).collect();
    for _ in 0..config.refine_iters {
        match refit_from_posteriors(&small, &posteriors) {
            Some(next) => color = next,
            None => break,
        }
        posteriors = small.iter().map(|f| color.classify(f)).collect();
    }

    let masks = errors
        .iter()
        .zip(&posteriors)
        .map(|(e, p)| {
            let data = e
                .iter()
                .zip(p)
                .map(|(&e, &p)| combine(config.combine, e, p).round().clamp(0.0, 255.0) as u8)
                .collect();
            SoftMask::new(w, h, data)
        })
        .collect::<Result<_>>()?;
    Ok(Discovery { masks, warnings })
}
