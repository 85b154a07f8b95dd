use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::arch::Preset;
use super::checkpoint::save_checkpoint;
use super::network::{backward_into, forward, input_tensor, loss, loss_grad, target_tensor, NetworkParams};
use crate::dataset::{read_jsonl, resolve, TrainingRecord};
use crate::error::{Error, Result};
use crate::imagery::{read_image, read_mask, to_student_channels, ChannelStack, Image, SoftMask};
use crate::rng::stage_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub lr: f64,
    /// Save a checkpoint with optimizer state every this many steps; 0
    /// disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// CSV `step,loss`, one row per step.
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            batch: 16,
            steps: 2000,
            seed: 0,
            lr: AdamState::<f32>::DEFAULT_LR,
            checkpoint_every: 0,
            checkpoint_path: None,
            loss_log: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train: batch must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("train: steps must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("train: invalid learning rate {}", self.lr)));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::Config("train: checkpoint cadence set without a checkpoint path".into()));
        }
        Ok(())
    }
}

/// One augmented crop: the RGB image at network input size and its target
/// mask at output size.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub target: SoftMask,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub adam: AdamState<f32>,
    /// `(step, loss)` with steps counted from 1; the loss is that of the
    /// batch before the update.
    pub losses: Vec<(usize, f64)>,
}

/// Fits the student from scratch. Examples are visited in a seeded
/// permutation that is redrawn every epoch; a batch may straddle epochs.
pub fn train(samples: &[TrainSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("train: no training examples".into()));
    }
    let arch = config.preset.architecture();
    let mut params = NetworkParams::<f32>::init(&arch, &mut stage_rng(config.seed, "train-init"))?;
    let mut adam = AdamState::new(&params).with_lr(config.lr);
    let mut shuffle_rng = stage_rng(config.seed, "train-shuffle");
    let mut grads = NetworkParams::<f32>::zeros(&arch)?;

    let mut log = match &config.loss_log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "step,loss").map_err(|e| Error::io(path, e))?;
            Some((w, path.clone()))
        }
        None => None,
    };

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let mut picked = Vec::with_capacity(config.batch);
        while picked.len() < config.batch {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let stacks = picked
            .iter()
            .map(|&i| to_student_channels(&samples[i].image, arch.input_size))
            .collect::<Result<Vec<ChannelStack>>>()?;
        let input = input_tensor::<f32>(&stacks.iter().collect::<Vec<_>>(), &arch)?;
        let targets = target_tensor::<f32>(
            &picked.iter().map(|&i| &samples[i].target).collect::<Vec<_>>(),
            &arch,
        )?;
        let acts = forward(&params, &input)?;
        let l = loss(&acts.output, &targets, acts.batch);
        backward_into(&params, &acts, &loss_grad(&acts.output, &targets, acts.batch), &mut grads)?;
        drop(acts);
        adam_step(&mut params, &grads, &mut adam)?;
        losses.push((step, l));
        if let Some((w, path)) = log.as_mut() {
            writeln!(w, "{step},{l}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            if let Some(path) = &config.checkpoint_path {
                save_checkpoint(&params, Some(&adam), path)?;
            }
        }
        if step == 1 || step % 50 == 0 || step == config.steps {
            log::info!("train step {step}/{}: loss {l:.6}", config.steps);
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(TrainOutcome {
        params,
        adam,
        losses,
    })
}

/// Loads an augmented-crop manifest (paths relative to the manifest).
pub fn load_samples(manifest: &Path) -> Result<Vec<TrainSample>> {
    let records: Vec<TrainingRecord> = read_jsonl(manifest)?;
    records
        .iter()
        .map(|r| {
            Ok(TrainSample {
                image: read_image(resolve(manifest, &r.image_path))?,
                target: read_mask(resolve(manifest, &r.mask_path))?,
            })
        })
        .collect()
}

pub fn train_from_manifest(manifest: impl AsRef<Path>, config: &TrainConfig) -> Result<TrainOutcome> {
    train(&load_samples(manifest.as_ref())?, config)
}
