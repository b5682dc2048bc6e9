//! Two-stage font effect generation: a mask-conditioned coarse sample and
//! its regeneration for the reference glyph, then style transfer to the
//! remaining glyphs through a noised latent prior and joint attention with
//! the reference.
//!
//! The denoiser works on normalised latents; every encode is followed by
//! the model's latent normalisation and every decode is preceded by its
//! inverse.

use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderModel;
use crate::autograd::Routing;
use crate::canvas::{crop_paste_white, AlphaMask, CanvasMask, RgbImage};
use crate::denoiser::{DenoiserModel, EpsQuery, PromptId};
use crate::error::{param_err, Result};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scalar::Scalar;
use crate::schedule::{cfg_combine, ddim_step, forward_noise, LatentTensor, NoiseSchedule, StartPoint};
use crate::tensor::Tensor;

pub const DEFAULT_CFG_SCALE: f64 = 6.0;
pub const DEFAULT_STRENGTH_SRM: f64 = 0.8;
pub const DEFAULT_STRENGTH_SAET_SGM: f64 = 0.9;
pub const DEFAULT_STRENGTH_SAET_SRM: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct EffectResult {
    pub image: RgbImage,
    pub alpha: AlphaMask,
    pub source_mask: CanvasMask,
    pub prompt: PromptId,
    pub seed: u64,
}

/// The reference glyph a transfer draws its style from.
#[derive(Clone, Debug)]
pub struct TransferContext {
    pub ref_mask: CanvasMask,
    /// Coarse reference for the sampling stage, refined reference for the
    /// refinement stage.
    pub ref_image: RgbImage,
    pub strength_sgm: f64,
    pub strength_srm: f64,
    /// Joint attention with the reference; off means the target is denoised
    /// alone and only the latent prior carries style.
    pub propagate: bool,
}

impl TransferContext {
    pub fn new(ref_mask: CanvasMask, ref_image: RgbImage) -> Self {
        Self {
            ref_mask,
            ref_image,
            strength_sgm: DEFAULT_STRENGTH_SAET_SGM,
            strength_srm: DEFAULT_STRENGTH_SAET_SRM,
            propagate: true,
        }
    }

    fn validate(&self) -> Result<()> {
        for s in [self.strength_sgm, self.strength_srm] {
            if !(0.0..=1.0).contains(&s) {
                return Err(param_err(format!("transfer strength {s} outside [0, 1]")));
            }
        }
        if self.ref_image.width() != self.ref_mask.width() || self.ref_image.height() != self.ref_mask.height() {
            return Err(param_err("reference image and mask differ in size"));
        }
        self.ref_mask.validate_condition()
    }
}

/// Trained models plus the sampling knobs shared by every stage.
#[derive(Clone, Debug)]
pub struct Sampler<'m, T> {
    pub denoiser: &'m DenoiserModel<T>,
    pub ae: &'m AutoencoderModel<T>,
    pub schedule: NoiseSchedule,
    pub cfg_scale: f64,
    /// `Routing::Plain` disables the foreground/background split.
    pub routing: Routing,
}

fn gaussian<T: Scalar>(shape: &[usize], seed: u64, tags: &[u64]) -> LatentTensor<T> {
    Tensor::randn(shape, &mut rng_for(seed, tags))
}

impl<'m, T: Scalar> Sampler<'m, T> {
    pub fn new(denoiser: &'m DenoiserModel<T>, ae: &'m AutoencoderModel<T>, schedule: NoiseSchedule) -> Self {
        Self {
            denoiser,
            ae,
            schedule,
            cfg_scale: DEFAULT_CFG_SCALE,
            routing: Routing::ShapeAdaptive,
        }
    }

    fn latent_shape(&self) -> Vec<usize> {
        let c = &self.denoiser.config;
        vec![c.latent_channels, c.latent_size, c.latent_size]
    }

    fn guided(&self) -> bool {
        self.cfg_scale != 1.0
    }

    /// Normalised latent of an image.
    pub fn encode(&self, image: &RgbImage) -> Result<LatentTensor<T>> {
        Ok(self.denoiser.latent_norm.normalize(&self.ae.encode(image)?))
    }

    pub fn decode(&self, z: &LatentTensor<T>, mask: &CanvasMask) -> Result<(RgbImage, AlphaMask)> {
        self.ae.decode_svd(&self.denoiser.latent_norm.denormalize(z), mask)
    }

    /// Guided noise prediction for one latent.
    fn eps_single(&self, z: &LatentTensor<T>, t: usize, prompt: PromptId, mask: &CanvasMask) -> Result<LatentTensor<T>> {
        let cond = EpsQuery { t, prompt, mask };
        if !self.guided() {
            return Ok(self.denoiser.predict_batch(&[z], &[cond], &[vec![0]], self.routing)?.remove(0));
        }
        let null = EpsQuery {
            prompt: self.denoiser.null_prompt(),
            ..cond
        };
        let mut out = self
            .denoiser
            .predict_batch(&[z, z], &[cond, null], &[vec![0], vec![1]], self.routing)?;
        let u = out.pop().expect("two outputs");
        let c = out.pop().expect("two outputs");
        cfg_combine(&c, &u, T::from_f64_lossy(self.cfg_scale))
    }

    /// Guided target noise from a joint pass with the reference. The
    /// unconditional pass keeps the reference half as in the conditional
    /// one and only drops the target prompt.
    #[allow(clippy::too_many_arguments)]
    fn eps_joint(
        &self,
        z_ref: &LatentTensor<T>,
        z: &LatentTensor<T>,
        t: usize,
        prompt: PromptId,
        ref_mask: &CanvasMask,
        mask: &CanvasMask,
    ) -> Result<LatentTensor<T>> {
        let r = EpsQuery {
            t,
            prompt,
            mask: ref_mask,
        };
        let cond = EpsQuery { t, prompt, mask };
        if !self.guided() {
            let out = self
                .denoiser
                .predict_batch(&[z_ref, z], &[r, cond], &[vec![0, 1]], self.routing)?;
            return Ok(out.into_iter().nth(1).expect("two outputs"));
        }
        let null = EpsQuery {
            prompt: self.denoiser.null_prompt(),
            ..cond
        };
        let out = self.denoiser.predict_batch(
            &[z_ref, z, z_ref, z],
            &[r, cond, r, null],
            &[vec![0, 1], vec![2, 3]],
            self.routing,
        )?;
        cfg_combine(&out[1], &out[3], T::from_f64_lossy(self.cfg_scale))
    }

    /// Runs the last `start.start_index` ladder steps from `z`.
    fn denoise_tail(
        &self,
        mut z: LatentTensor<T>,
        start: StartPoint,
        mut eps_at: impl FnMut(&LatentTensor<T>, usize, usize) -> Result<LatentTensor<T>>,
    ) -> Result<LatentTensor<T>> {
        for (k, (t, t_prev)) in self.schedule.tail_pairs(start.start_index).into_iter().enumerate() {
            let eps = eps_at(&z, t, k)?;
            z = ddim_step(&z, &eps, t, t_prev, &self.schedule)?;
        }
        Ok(z)
    }

    fn check(&self, mask: &CanvasMask, prompt: PromptId) -> Result<()> {
        mask.validate_condition()?;
        self.denoiser.check_prompt(prompt)?;
        if !self.cfg_scale.is_finite() {
            return Err(param_err("guidance scale must be finite"));
        }
        Ok(())
    }

    /// Partially noised latent of `prior_image` and where the ladder resumes.
    /// Strength 1 discards the image and draws pure noise; strength 0 returns
    /// the normalised latent unchanged.
    pub fn saet_prior(&self, prior_image: &RgbImage, strength: f64, seed: u64) -> Result<(LatentTensor<T>, StartPoint)> {
        let start = self.schedule.strength_to_start(strength)?;
        let eps = gaussian(&self.latent_shape(), seed, &[stream::PRIOR]);
        if start.pure_noise {
            return Ok((eps, start));
        }
        let z0 = self.encode(prior_image)?;
        let z = match start.t_start {
            Some(t) => forward_noise(&z0, t, &eps, &self.schedule)?,
            None => z0,
        };
        Ok((z, start))
    }

    /// Coarse sample from pure noise over the full ladder.
    pub fn sgm_sample(&self, mask: &CanvasMask, prompt: PromptId, seed: u64) -> Result<RgbImage> {
        self.check(mask, prompt)?;
        let z = gaussian(&self.latent_shape(), seed, &[stream::SGM]);
        let start = self.schedule.strength_to_start(1.0)?;
        let z0 = self.denoise_tail(z, start, |z, t, _| self.eps_single(z, t, prompt, mask))?;
        Ok(self.decode(&z0, mask)?.0)
    }

    /// Regenerates the white-pasted coarse image from `strength` and decodes
    /// it with an alpha layer.
    pub fn srm_refine(
        &self,
        coarse: &RgbImage,
        mask: &CanvasMask,
        prompt: PromptId,
        strength: f64,
        seed: u64,
    ) -> Result<EffectResult> {
        self.check(mask, prompt)?;
        let pasted = crop_paste_white(coarse, mask)?;
        let start = self.schedule.strength_to_start(strength)?;
        let (image, alpha) = if start.start_index == 0 {
            self.ae.decode_svd(&self.ae.encode(&pasted)?, mask)?
        } else {
            let eps = gaussian(&self.latent_shape(), seed, &[stream::SRM]);
            let z = if start.pure_noise {
                eps
            } else {
                let t = start.t_start.expect("positive start index");
                forward_noise(&self.encode(&pasted)?, t, &eps, &self.schedule)?
            };
            let z0 = self.denoise_tail(z, start, |z, t, _| self.eps_single(z, t, prompt, mask))?;
            self.decode(&z0, mask)?
        };
        Ok(EffectResult {
            image,
            alpha,
            source_mask: mask.clone(),
            prompt,
            seed,
        })
    }

    /// Shared body of both transfer stages: prior from `prior_image`, then
    /// propagation from `ctx.ref_image` re-noised to each step's level.
    #[allow(clippy::too_many_arguments)]
    fn transfer(
        &self,
        ctx: &TransferContext,
        prior_image: &RgbImage,
        strength: f64,
        tgt_mask: &CanvasMask,
        prompt: PromptId,
        seed: u64,
        stage: u64,
    ) -> Result<LatentTensor<T>> {
        ctx.validate()?;
        self.check(tgt_mask, prompt)?;
        let (z, start) = self.saet_prior(prior_image, strength, derive_seed(seed, &[stage]))?;
        if !ctx.propagate {
            return self.denoise_tail(z, start, |z, t, _| self.eps_single(z, t, prompt, tgt_mask));
        }
        let z_ref0 = self.encode(&ctx.ref_image)?;
        let shape = self.latent_shape();
        self.denoise_tail(z, start, |z, t, k| {
            let eps = gaussian(&shape, seed, &[stream::PROPAGATION, stage, k as u64]);
            let z_ref = forward_noise(&z_ref0, t, &eps, &self.schedule)?;
            self.eps_joint(&z_ref, z, t, prompt, &ctx.ref_mask, tgt_mask)
        })
    }

    /// Coarse target sample styled after the coarse reference.
    pub fn saet_sample(&self, ctx: &TransferContext, tgt_mask: &CanvasMask, prompt: PromptId, seed: u64) -> Result<RgbImage> {
        let z0 = self.transfer(ctx, &ctx.ref_image, ctx.strength_sgm, tgt_mask, prompt, seed, 0)?;
        Ok(self.decode(&z0, tgt_mask)?.0)
    }

    /// Refined target: prior from the target's own pasted coarse image,
    /// propagation from the refined reference.
    pub fn saet_refine(
        &self,
        ctx: &TransferContext,
        coarse_tgt: &RgbImage,
        tgt_mask: &CanvasMask,
        prompt: PromptId,
        seed: u64,
    ) -> Result<EffectResult> {
        let pasted = crop_paste_white(coarse_tgt, tgt_mask)?;
        let (image, alpha) = if self.schedule.strength_to_start(ctx.strength_srm)?.start_index == 0 {
            ctx.validate()?;
            self.check(tgt_mask, prompt)?;
            self.ae.decode_svd(&self.ae.encode(&pasted)?, tgt_mask)?
        } else {
            let z0 = self.transfer(ctx, &pasted, ctx.strength_srm, tgt_mask, prompt, seed, 1)?;
            self.decode(&z0, tgt_mask)?
        };
        Ok(EffectResult {
            image,
            alpha,
            source_mask: tgt_mask.clone(),
            prompt,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateOptions {
    pub strength_srm: f64,
    pub strength_saet_sgm: f64,
    pub strength_saet_srm: f64,
    /// Off: every glyph is generated independently as its own reference.
    pub saet: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            strength_srm: DEFAULT_STRENGTH_SRM,
            strength_saet_sgm: DEFAULT_STRENGTH_SAET_SGM,
            strength_saet_srm: DEFAULT_STRENGTH_SAET_SRM,
            saet: true,
        }
    }
}

/// Index of the mask with the most foreground pixels (lowest on ties).
pub fn select_reference(masks: &[CanvasMask]) -> Result<usize> {
    if masks.is_empty() {
        return Err(param_err("at least one mask is required"));
    }
    let mut best = 0;
    for (i, m) in masks.iter().enumerate() {
        if m.foreground_count() > masks[best].foreground_count() {
            best = i;
        }
    }
    Ok(best)
}

/// Generates one result per mask, in input order, plus the reference index.
pub fn font_effect_generate<T: Scalar>(
    sampler: &Sampler<'_, T>,
    masks: &[CanvasMask],
    prompt: PromptId,
    seed: u64,
    opts: &GenerateOptions,
) -> Result<(Vec<EffectResult>, usize)> {
    let r = select_reference(masks)?;
    let stage1 = |mask: &CanvasMask| -> Result<(RgbImage, EffectResult)> {
        let coarse = sampler.sgm_sample(mask, prompt, seed)?;
        let refined = sampler.srm_refine(&coarse, mask, prompt, opts.strength_srm, seed)?;
        Ok((coarse, refined))
    };
    if !opts.saet {
        let results = masks.iter().map(|m| Ok(stage1(m)?.1)).collect::<Result<Vec<_>>>()?;
        return Ok((results, r));
    }
    let (ref_coarse, ref_result) = stage1(&masks[r])?;
    let ctx = TransferContext {
        strength_sgm: opts.strength_saet_sgm,
        strength_srm: opts.strength_saet_srm,
        ..TransferContext::new(masks[r].clone(), ref_coarse)
    };
    let mut results = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        if i == r {
            results.push(ref_result.clone());
            continue;
        }
        let coarse = sampler.saet_sample(&ctx, mask, prompt, seed)?;
        let refine_ctx = TransferContext {
            ref_image: ref_result.image.clone(),
            ..ctx.clone()
        };
        results.push(sampler.saet_refine(&refine_ctx, &coarse, mask, prompt, seed)?);
    }
    Ok((results, r))
}
