//! Noise schedule, forward noising, the deterministic DDIM update,
//! classifier-free guidance and noise-strength handling.

use crate::error::{param_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Latent feature map, shape `[channels, height, width]`.
pub type LatentTensor<T> = Tensor<T>;

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    train_steps: usize,
    inference_steps: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    ladder: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear betas from `1e-4` to `2e-2` over `train_steps`.
    pub fn new(train_steps: usize, inference_steps: usize) -> Result<Self> {
        if train_steps < 2 {
            return Err(param_err(format!(
                "need at least 2 training timesteps, got {train_steps}"
            )));
        }
        if inference_steps == 0 || inference_steps > train_steps {
            return Err(param_err(format!(
                "inference steps {inference_steps} must lie in [1, {train_steps}]"
            )));
        }
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (train_steps - 1) as f64)
            .collect();
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        let mut ladder: Vec<usize> = (0..inference_steps)
            .map(|i| train_steps * i / inference_steps)
            .collect();
        ladder.dedup();
        ladder.reverse();
        Ok(Self {
            train_steps,
            inference_steps,
            betas,
            alpha_bars,
            ladder,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn inference_steps(&self) -> usize {
        self.inference_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.betas.iter().map(|b| 1.0 - b).collect()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar` at `t`, with `alpha_bar(None) = 1` for the clean end.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    /// Inference timesteps, strictly decreasing.
    pub fn ladder(&self) -> &[usize] {
        &self.ladder
    }

    /// The `(t, t_prev)` pairs of the last `steps` ladder entries.
    pub fn tail_pairs(&self, steps: usize) -> Vec<(usize, Option<usize>)> {
        let n = self.ladder.len();
        let steps = steps.min(n);
        (n - steps..n)
            .map(|i| (self.ladder[i], self.ladder.get(i + 1).copied()))
            .collect()
    }

    /// Maps a noise strength to the number of ladder steps to execute.
    pub fn strength_to_start(&self, strength: f64) -> Result<StartPoint> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(param_err(format!("strength {strength} outside [0, 1]")));
        }
        let n = self.ladder.len();
        let start_index = ((strength * n as f64).floor() as usize).min(n);
        let t_start = (start_index > 0).then(|| self.ladder[n - start_index]);
        Ok(StartPoint {
            start_index,
            t_start,
            pure_noise: start_index == n,
        })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.train_steps {
            return Err(param_err(format!(
                "timestep {t} outside [0, {})",
                self.train_steps
            )));
        }
        Ok(())
    }
}

/// Where a partial-noising run enters the inference ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StartPoint {
    /// Number of denoising steps executed (0 = input returned unchanged).
    pub start_index: usize,
    /// Training timestep the latent is noised to; `None` when no step runs.
    pub t_start: Option<usize>,
    /// The whole ladder runs; the initial latent is pure standard normal.
    pub pure_noise: bool,
}

/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise<T: Scalar>(
    z0: &LatentTensor<T>,
    t: usize,
    eps: &LatentTensor<T>,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor<T>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bars[t];
    noise_with_alpha_bar(z0, ab, eps)
}

pub(crate) fn noise_with_alpha_bar<T: Scalar>(
    z0: &LatentTensor<T>,
    alpha_bar: f64,
    eps: &LatentTensor<T>,
) -> Result<LatentTensor<T>> {
    let a = T::from_f64_lossy(alpha_bar.sqrt());
    let s = T::from_f64_lossy((1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| a * z + s * e)
}

/// Deterministic DDIM (eta = 0) update from `t` to `t_prev` (`None` = the
/// clean end).
pub fn ddim_step<T: Scalar>(
    z_t: &LatentTensor<T>,
    eps_pred: &LatentTensor<T>,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor<T>> {
    schedule.check_t(t)?;
    if let Some(p) = t_prev {
        schedule.check_t(p)?;
        if p > t {
            return Err(param_err(format!(
                "DDIM step must move towards the clean end: t = {t}, t_prev = {p}"
            )));
        }
    }
    let ab_t = schedule.alpha_bars[t];
    let ab_prev = schedule.alpha_bar(t_prev);
    let inv_sqrt_ab = T::from_f64_lossy(1.0 / ab_t.sqrt());
    let s_t = T::from_f64_lossy((1.0 - ab_t).sqrt());
    let a_prev = T::from_f64_lossy(ab_prev.sqrt());
    let s_prev = T::from_f64_lossy((1.0 - ab_prev).sqrt());
    if t_prev == Some(t) {
        return Ok(z_t.clone());
    }
    z_t.zip_map(eps_pred, |z, e| {
        let x0 = (z - s_t * e) * inv_sqrt_ab;
        a_prev * x0 + s_prev * e
    })
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_combine<T: Scalar>(
    eps_cond: &LatentTensor<T>,
    eps_uncond: &LatentTensor<T>,
    scale: T,
) -> Result<LatentTensor<T>> {
    eps_cond.zip_map(eps_uncond, |c, u| u + scale * (c - u))
}
