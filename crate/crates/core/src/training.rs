//! Training loops for the autoencoder and the denoiser, with checkpoints
//! that carry optimizer state so an interrupted run resumes bit-exactly.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{ae_training_step, AeSample, AutoencoderModel};
use crate::checkpoint::{self, find, TensorList};
use crate::denoiser::{training_step, DenoiseSample, DenoiserModel, LatentNorm};
use crate::error::{param_err, Error, Result};
use crate::nn::{Optimizer, OptimizerKind};
use crate::rng::{derive_seed, rng_for, stream};
use crate::schedule::NoiseSchedule;
use crate::synthdata::Triplet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Checkpoint cadence in steps; the final step is always saved.
    pub checkpoint_every: u64,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(param_err("batch size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(param_err(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.checkpoint_every == 0 {
            return Err(param_err("checkpoint cadence must be positive"));
        }
        Ok(())
    }
}

/// Dataset indices of the batch used at `step`.
pub fn batch_indices(seed: u64, step: u64, n_items: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, &[stream::TRAIN, step, 1]);
    (0..batch_size).map(|_| rng.random_range(0..n_items)).collect()
}

/// Seed for the per-step draws (augmentation, timesteps, noise).
pub fn step_seed(seed: u64, step: u64) -> u64 {
    derive_seed(seed, &[stream::TRAIN, step, 2])
}

fn step_tensor(step: u64) -> Tensor<f32> {
    let s = step.min(u32::MAX as u64);
    Tensor::new(&[2], vec![(s >> 16) as f32, (s & 0xFFFF) as f32]).expect("two words")
}

fn read_step(tensors: &TensorList) -> Result<u64> {
    let d = find(tensors, "meta.train_step")?.data();
    if d.len() != 2 || d.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(Error::Checkpoint("corrupt training step".into()));
    }
    Ok(((d[0] as u64) << 16) | d[1] as u64)
}

/// Training step recorded in a checkpoint; `None` for weights-only files.
pub fn checkpoint_step(tensors: &TensorList) -> Result<Option<u64>> {
    if find(tensors, "meta.train_step").is_err() {
        return Ok(None);
    }
    read_step(tensors).map(Some)
}

fn with_state(mut tensors: TensorList, optimizer: &Optimizer<f32>, step: u64) -> TensorList {
    tensors.push(("meta.train_step".into(), step_tensor(step)));
    tensors.extend(optimizer.state_tensors());
    tensors
}

/// Step and optimizer stored in a training checkpoint; `(0, fresh)` when
/// the checkpoint holds weights only.
fn restore_state(tensors: &TensorList, kind: OptimizerKind) -> Result<(u64, Optimizer<f32>)> {
    if find(tensors, "meta.train_step").is_err() {
        return Ok((0, Optimizer::new(kind)));
    }
    let step = read_step(tensors)?;
    let opt = Optimizer::from_state_tensors(kind, tensors.iter().map(|(k, v)| (k.as_str(), v)))?;
    Ok((step, opt))
}

/// Loss log in CSV form (`step,loss`). Rows at or after `from_step` are
/// dropped from an existing log so a resumed run rewrites them.
pub struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    pub fn open(path: &Path, from_step: u64) -> Result<Self> {
        let mut kept = String::from("step,loss\n");
        if from_step > 0 {
            if let Ok(text) = std::fs::read_to_string(path) {
                for line in text.lines().skip(1) {
                    let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if matches!(step, Some(s) if s < from_step) {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(kept.as_bytes())?;
        Ok(Self { file })
    }

    pub fn record(&mut self, step: u64, loss: f64) -> Result<()> {
        writeln!(self.file, "{step},{loss}")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, v) = l
                .split_once(',')
                .ok_or_else(|| param_err(format!("malformed loss row `{l}`")))?;
            Ok((
                s.parse().map_err(|_| param_err(format!("bad step `{s}`")))?,
                v.parse().map_err(|_| param_err(format!("bad loss `{v}`")))?,
            ))
        })
        .collect()
}

/// Where a run writes, and an optional progress callback `(step, loss)`.
pub struct RunPaths<'p> {
    pub checkpoint: &'p Path,
    pub log: &'p Path,
}

fn run_loop(
    opts: &TrainOptions,
    start: u64,
    paths: &RunPaths<'_>,
    mut step_fn: impl FnMut(u64) -> Result<f64>,
    mut save: impl FnMut(u64) -> Result<()>,
    progress: &mut dyn FnMut(u64, f64),
) -> Result<()> {
    opts.validate()?;
    let mut log = LossLog::open(paths.log, start)?;
    if start == 0 {
        save(0)?;
    }
    for step in start..opts.steps {
        let loss = match step_fn(step) {
            Ok(l) => l,
            Err(Error::Divergence { loss, .. }) => {
                log.flush()?;
                return Err(Error::Divergence { step, loss });
            }
            Err(e) => return Err(e),
        };
        log.record(step, loss)?;
        progress(step, loss);
        let done = step + 1;
        if done % opts.checkpoint_every == 0 || done == opts.steps {
            log.flush()?;
            save(done)?;
        }
    }
    log.flush()?;
    Ok(())
}

/// Trains (or resumes) an autoencoder on `data`.
pub fn train_autoencoder(
    model: AutoencoderModel<f32>,
    resume: Option<&TensorList>,
    data: &[Triplet],
    opts: &TrainOptions,
    paths: &RunPaths<'_>,
    progress: &mut dyn FnMut(u64, f64),
) -> Result<AutoencoderModel<f32>> {
    if data.is_empty() && opts.steps > 0 {
        return Err(param_err("cannot train on an empty dataset"));
    }
    let (start, mut opt, mut model) = match resume {
        Some(t) => {
            let (s, o) = restore_state(t, opts.optimizer)?;
            (s, o, AutoencoderModel::from_tensors(t)?)
        }
        None => (0, Optimizer::new(opts.optimizer), model),
    };
    let cell = std::cell::RefCell::new((&mut model, &mut opt));
    run_loop(
        opts,
        start,
        paths,
        |step| {
            let idx = batch_indices(opts.seed, step, data.len(), opts.batch_size);
            let batch: Vec<AeSample<'_>> = idx
                .iter()
                .map(|&i| AeSample {
                    image: &data[i].image,
                    gt_mask: &data[i].mask,
                })
                .collect();
            let mut guard = cell.borrow_mut();
            let (m, o) = &mut *guard;
            ae_training_step(m, o, &batch, step_seed(opts.seed, step), opts.lr)
        },
        |step| {
            let guard = cell.borrow();
            checkpoint::save(paths.checkpoint, &with_state(guard.0.to_tensors(), guard.1, step))
        },
        progress,
    )?;
    Ok(model)
}

/// Trains (or resumes) a denoiser on pre-encoded, normalised latents.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    model: DenoiserModel<f32>,
    resume: Option<&TensorList>,
    data: &[DenoiseSample<f32>],
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
    paths: &RunPaths<'_>,
    progress: &mut dyn FnMut(u64, f64),
) -> Result<DenoiserModel<f32>> {
    if data.is_empty() && opts.steps > 0 {
        return Err(param_err("cannot train on an empty dataset"));
    }
    let (start, mut opt, mut model) = match resume {
        Some(t) => {
            let (s, o) = restore_state(t, opts.optimizer)?;
            (s, o, DenoiserModel::from_tensors(t)?)
        }
        None => (0, Optimizer::new(opts.optimizer), model),
    };
    let cell = std::cell::RefCell::new((&mut model, &mut opt));
    run_loop(
        opts,
        start,
        paths,
        |step| {
            let idx = batch_indices(opts.seed, step, data.len(), opts.batch_size);
            let batch: Vec<DenoiseSample<f32>> = idx.iter().map(|&i| data[i].clone()).collect();
            let mut guard = cell.borrow_mut();
            let (m, o) = &mut *guard;
            training_step(m, o, &batch, schedule, step_seed(opts.seed, step), opts.lr)
        },
        |step| {
            let guard = cell.borrow();
            checkpoint::save(paths.checkpoint, &with_state(guard.0.to_tensors(), guard.1, step))
        },
        progress,
    )?;
    Ok(model)
}

/// Encodes a dataset with `ae`, fits latent statistics and returns the
/// normalised training samples alongside the fitted map.
pub fn prepare_latents(
    ae: &AutoencoderModel<f32>,
    data: &[Triplet],
    chunk: usize,
) -> Result<(Vec<DenoiseSample<f32>>, LatentNorm)> {
    let mut latents = Vec::with_capacity(data.len());
    for part in data.chunks(chunk.max(1)) {
        let imgs: Vec<_> = part.iter().map(|t| &t.image).collect();
        latents.extend(ae.encode_batch(&imgs)?);
    }
    let norm = LatentNorm::fit(&latents.iter().collect::<Vec<_>>())?;
    let samples = latents
        .iter()
        .zip(data)
        .map(|(z, t)| DenoiseSample {
            z0: norm.normalize(z),
            prompt: t.label.prompt(),
            mask: t.mask.clone(),
        })
        .collect();
    Ok((samples, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AutoencoderConfig;
    use crate::synthdata::generate_dataset;

    #[test]
    fn resumed_run_matches_unbroken_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_dataset(1, 6).unwrap();
        let cfg = AutoencoderConfig {
            channels: [8, 8, 8],
            ..AutoencoderConfig::default()
        };
        let opts = TrainOptions {
            steps: 4,
            batch_size: 2,
            lr: 1e-3,
            seed: 9,
            optimizer: OptimizerKind::adam(),
            checkpoint_every: 2,
        };
        let full_ckpt = dir.path().join("full.sadm");
        let full_log = dir.path().join("full.csv");
        let full = train_autoencoder(
            AutoencoderModel::init(cfg, 1).unwrap(),
            None,
            &data,
            &opts,
            &RunPaths {
                checkpoint: &full_ckpt,
                log: &full_log,
            },
            &mut |_, _| {},
        )
        .unwrap();

        let part_ckpt = dir.path().join("part.sadm");
        let part_log = dir.path().join("part.csv");
        let paths = RunPaths {
            checkpoint: &part_ckpt,
            log: &part_log,
        };
        train_autoencoder(
            AutoencoderModel::init(cfg, 1).unwrap(),
            None,
            &data,
            &TrainOptions { steps: 2, ..opts },
            &paths,
            &mut |_, _| {},
        )
        .unwrap();
        let saved = checkpoint::load(&part_ckpt).unwrap();
        let resumed = train_autoencoder(
            AutoencoderModel::init(cfg, 99).unwrap(),
            Some(&saved),
            &data,
            &opts,
            &paths,
            &mut |_, _| {},
        )
        .unwrap();
        assert_eq!(resumed, full);
        assert_eq!(
            std::fs::read(&full_ckpt).unwrap(),
            std::fs::read(&part_ckpt).unwrap()
        );
        assert_eq!(read_loss_log(&full_log).unwrap(), read_loss_log(&part_log).unwrap());
    }

    #[test]
    fn zero_steps_saves_initialisation() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ae.sadm");
        let log = dir.path().join("ae.csv");
        let cfg = AutoencoderConfig {
            channels: [8, 8, 8],
            ..AutoencoderConfig::default()
        };
        let init = AutoencoderModel::init(cfg, 3).unwrap();
        let opts = TrainOptions {
            steps: 0,
            batch_size: 2,
            lr: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::adam(),
            checkpoint_every: 10,
        };
        train_autoencoder(
            init.clone(),
            None,
            &[],
            &opts,
            &RunPaths {
                checkpoint: &ckpt,
                log: &log,
            },
            &mut |_, _| {},
        )
        .unwrap();
        let back = AutoencoderModel::from_tensors(&checkpoint::load(&ckpt).unwrap()).unwrap();
        assert_eq!(back, init);
        assert!(read_loss_log(&log).unwrap().is_empty());
    }
}
