//! Mask-conditioned UNet noise predictor.
//!
//! Layout (base width `c`, latent `4 x 16 x 16`, mask as a fifth input
//! channel):
//!
//! ```text
//! in   conv 5 -> c                       16x16
//! d1   res c -> c                         16x16   skip s1
//!      conv stride 2                      8x8
//! d2   res c -> 2c, attn                  8x8     skip s2
//!      conv stride 2                      4x4
//! mid  res 2c -> 2c, attn                 4x4
//! u2   up, cat s2, res 4c -> 2c, attn     8x8
//! u1   up, cat s1, res 3c -> c            16x16
//! out  norm, silu, conv c -> 4
//! ```
//!
//! A joint call puts two latents in one batch and lets their self-attention
//! tokens form a single sequence, which is the same as concatenating them
//! along width with each half padded on its own.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::TokenMask;
use crate::autograd::{AttnLayout, Graph, Routing, Var};
use crate::canvas::{downsample_mask, CanvasMask};
use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::{scaled_normal, Optimizer, ParamStore};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::schedule::{noise_with_alpha_bar, LatentTensor, NoiseSchedule};
use crate::tensor::Tensor;

pub const TIME_EMBED_DIM: usize = 128;
pub const NORM_GROUPS: usize = 8;
/// Probability that a training item's prompt is replaced by the null class.
pub const PROMPT_DROP_PROB: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    /// Spatial kernel of every non-attention convolution (3, or 1 for the
    /// pointwise probe configuration).
    pub kernel_size: usize,
    /// Group normalisation on or off.
    pub norm: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            latent_channels: 4,
            latent_size: 16,
            n_heads: 4,
            n_classes: 8,
            kernel_size: 3,
            norm: true,
        }
    }
}

impl DenoiserConfig {
    pub fn mask_size(&self) -> usize {
        self.latent_size * 4
    }

    pub fn context_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || self.latent_channels == 0 || self.n_classes == 0 {
            return Err(param_err("denoiser dimensions must be positive"));
        }
        if self.latent_size == 0 || !self.latent_size.is_multiple_of(4) {
            return Err(param_err("latent size must be a positive multiple of 4"));
        }
        if self.n_heads == 0 || !(2 * c).is_multiple_of(self.n_heads) {
            return Err(param_err(format!(
                "{} heads do not divide {} attention channels",
                self.n_heads,
                2 * c
            )));
        }
        if self.norm && !c.is_multiple_of(NORM_GROUPS) {
            return Err(param_err(format!(
                "base channels {c} must be a multiple of {NORM_GROUPS} with normalisation on"
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(param_err("kernel size must be odd"));
        }
        Ok(())
    }

    /// Config as a flat numeric vector, for checkpoint storage.
    pub fn to_vec(&self) -> Vec<f32> {
        [
            self.base_channels,
            self.latent_channels,
            self.latent_size,
            self.n_heads,
            self.n_classes,
            self.kernel_size,
            usize::from(self.norm),
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    pub fn from_vec(v: &[f32]) -> Result<Self> {
        if v.len() != 7 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(Error::Checkpoint("malformed denoiser config tensor".into()));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = Self {
            base_channels: u(0),
            latent_channels: u(1),
            latent_size: u(2),
            n_heads: u(3),
            n_classes: u(4),
            kernel_size: u(5),
            norm: u(6) != 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Class index in `[0, n_classes]`; `n_classes` is the null class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptId(pub usize);

/// Per-channel affine map between autoencoder latents and the unit-scale
/// space the denoiser works in.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNorm {
    pub shift: Vec<f32>,
    pub scale: Vec<f32>,
}

impl LatentNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            shift: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    /// Per-channel mean and standard deviation over a set of latents.
    pub fn fit<T: Scalar>(latents: &[&LatentTensor<T>]) -> Result<Self> {
        let first = latents
            .first()
            .ok_or_else(|| param_err("cannot fit latent statistics on an empty set"))?;
        let c = first.dim(0);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for z in latents {
            if z.shape() != first.shape() {
                return Err(shape_err("latents differ in shape"));
            }
            let hw = z.len() / c;
            for (ch, plane) in z.data().chunks(hw).enumerate() {
                for v in plane {
                    let v = v.to_f64_lossy();
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += hw;
        }
        let mut shift = Vec::with_capacity(c);
        let mut scale = Vec::with_capacity(c);
        for ch in 0..c {
            let mean = sum[ch] / n as f64;
            let var = (sq[ch] / n as f64 - mean * mean).max(0.0);
            shift.push(mean as f32);
            scale.push(var.sqrt().max(1e-3) as f32);
        }
        Ok(Self { shift, scale })
    }

    pub fn normalize<T: Scalar>(&self, z: &LatentTensor<T>) -> LatentTensor<T> {
        self.apply(z, |v, s, k| (v - s) / k)
    }

    pub fn denormalize<T: Scalar>(&self, z: &LatentTensor<T>) -> LatentTensor<T> {
        self.apply(z, |v, s, k| v * k + s)
    }

    fn apply<T: Scalar>(&self, z: &LatentTensor<T>, f: impl Fn(T, T, T) -> T) -> LatentTensor<T> {
        let c = self.shift.len();
        let hw = z.len() / c;
        let mut out = z.clone();
        for (ch, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let s = T::from_f64_lossy(self.shift[ch] as f64);
            let k = T::from_f64_lossy(self.scale[ch] as f64);
            plane.iter_mut().for_each(|v| *v = f(*v, s, k));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<T> {
    pub config: DenoiserConfig,
    pub params: ParamStore<T>,
    pub latent_norm: LatentNorm,
}

/// Which attention wiring a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub routing: Routing,
    /// In joint calls, whether self-attention tokens of the two halves form
    /// one sequence. `false` cuts every cross-half attention edge.
    pub share_halves: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            routing: Routing::ShapeAdaptive,
            share_halves: true,
        }
    }
}

/// One batch element of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EpsQuery<'m> {
    pub t: usize,
    pub prompt: PromptId,
    pub mask: &'m CanvasMask,
}

struct PreparedMasks {
    input: Vec<f64>,
    tokens8: Vec<TokenMask>,
    tokens4: Vec<TokenMask>,
}

impl<T: Scalar> DenoiserModel<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT]);
        let mut p = ParamStore::new();
        let c = config.base_channels;
        let k = config.kernel_size;
        let e = config.context_dim();
        let lc = config.latent_channels;

        let conv = |p: &mut ParamStore<T>, rng: &mut crate::rng::SeededRng, name: &str, ci: usize, co: usize, k: usize, gain: f64| {
            p.insert(format!("{name}.w"), scaled_normal(&[co, ci, k, k], ci * k * k, gain, rng));
            p.insert(format!("{name}.b"), Tensor::zeros(&[co]));
        };
        let linear = |p: &mut ParamStore<T>, rng: &mut crate::rng::SeededRng, name: &str, fi: usize, fo: usize, bias: bool| {
            p.insert(format!("{name}.w"), scaled_normal(&[fo, fi], fi, 1.0, rng));
            if bias {
                p.insert(format!("{name}.b"), Tensor::zeros(&[fo]));
            }
        };
        let norm = |p: &mut ParamStore<T>, name: &str, ch: usize| {
            if config.norm {
                p.insert(format!("{name}.gamma"), Tensor::full(&[ch], T::one()));
                p.insert(format!("{name}.beta"), Tensor::zeros(&[ch]));
            }
        };
        let res = |p: &mut ParamStore<T>, rng: &mut crate::rng::SeededRng, name: &str, (ci, co): (usize, usize)| {
            norm(p, &format!("{name}.norm1"), ci);
            conv(p, rng, &format!("{name}.conv1"), ci, co, k, 1.0);
            linear(p, rng, &format!("{name}.temb"), e, co, true);
            norm(p, &format!("{name}.norm2"), co);
            conv(p, rng, &format!("{name}.conv2"), co, co, k, 1.0);
            if ci != co {
                conv(p, rng, &format!("{name}.skip"), ci, co, 1, 1.0);
            }
        };
        let attn = |p: &mut ParamStore<T>, rng: &mut crate::rng::SeededRng, name: &str, ch: usize| {
            norm(p, &format!("{name}.norm"), ch);
            for proj in ["q", "k", "v"] {
                p.insert(format!("{name}.{proj}.w"), scaled_normal(&[ch, ch, 1, 1], ch, 1.0, rng));
            }
            conv(p, rng, &format!("{name}.out"), ch, ch, 1, 1.0);
            norm(p, &format!("{name}.xnorm"), ch);
            p.insert(format!("{name}.xq.w"), scaled_normal(&[ch, ch, 1, 1], ch, 1.0, rng));
            linear(p, rng, &format!("{name}.xk"), e, ch, false);
            linear(p, rng, &format!("{name}.xv"), e, ch, false);
            conv(p, rng, &format!("{name}.xout"), ch, ch, 1, 1.0);
        };

        linear(&mut p, &mut rng, "temb.l1", TIME_EMBED_DIM, e, true);
        linear(&mut p, &mut rng, "temb.l2", e, e, true);
        p.insert(
            "class_emb",
            scaled_normal(&[config.n_classes + 1, e], 1, 1.0, &mut rng),
        );
        conv(&mut p, &mut rng, "conv_in", lc + 1, c, k, 1.0);
        res(&mut p, &mut rng, "d1", (c, c));
        conv(&mut p, &mut rng, "down1", c, c, k, 1.0);
        res(&mut p, &mut rng, "d2", (c, 2 * c));
        attn(&mut p, &mut rng, "d2.attn", 2 * c);
        conv(&mut p, &mut rng, "down2", 2 * c, 2 * c, k, 1.0);
        res(&mut p, &mut rng, "mid", (2 * c, 2 * c));
        attn(&mut p, &mut rng, "mid.attn", 2 * c);
        res(&mut p, &mut rng, "u2", (4 * c, 2 * c));
        attn(&mut p, &mut rng, "u2.attn", 2 * c);
        res(&mut p, &mut rng, "u1", (3 * c, c));
        norm(&mut p, "out.norm", c);
        conv(&mut p, &mut rng, "out.conv", c, lc, k, 0.1);
        Ok(Self {
            config,
            params: p,
            latent_norm: LatentNorm::identity(lc),
        })
    }

    pub fn null_prompt(&self) -> PromptId {
        PromptId(self.config.n_classes)
    }

    pub fn check_prompt(&self, prompt: PromptId) -> Result<()> {
        if prompt.0 > self.config.n_classes {
            return Err(param_err(format!(
                "prompt {} outside [0, {}]",
                prompt.0, self.config.n_classes
            )));
        }
        Ok(())
    }

    fn latent_shape(&self) -> [usize; 3] {
        let s = self.config.latent_size;
        [self.config.latent_channels, s, s]
    }

    fn check_latent(&self, z: &LatentTensor<T>) -> Result<()> {
        if z.shape() != self.latent_shape() {
            return Err(shape_err(format!(
                "latent {:?}, expected {:?}",
                z.shape(),
                self.latent_shape()
            )));
        }
        Ok(())
    }

    fn prepare_masks(&self, queries: &[EpsQuery<'_>]) -> Result<PreparedMasks> {
        let m = self.config.mask_size();
        let mut input = Vec::new();
        let mut tokens8 = Vec::new();
        let mut tokens4 = Vec::new();
        for q in queries {
            if q.mask.width() != m || q.mask.height() != m {
                return Err(shape_err(format!(
                    "condition mask {}x{}, expected {m}x{m}",
                    q.mask.width(),
                    q.mask.height()
                )));
            }
            self.check_prompt(q.prompt)?;
            input.extend(downsample_mask(q.mask, 4)?.data().iter().map(|&v| v as f64));
            tokens8.push(downsample_mask(q.mask, 8)?.to_token_mask());
            tokens4.push(downsample_mask(q.mask, 16)?.to_token_mask());
        }
        Ok(PreparedMasks {
            input,
            tokens8,
            tokens4,
        })
    }

    fn conv<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.params.bind(g, &format!("{name}.w"))?;
        let b = self.params.bind(g, &format!("{name}.b"))?;
        let pad = g.value(w).dim(2) / 2;
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn norm_act<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, name: &str) -> Result<Var> {
        let h = self.norm(g, x, name)?;
        Ok(g.silu(h))
    }

    fn norm<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, name: &str) -> Result<Var> {
        if !self.config.norm {
            return Ok(x);
        }
        let gamma = self.params.bind(g, &format!("{name}.gamma"))?;
        let beta = self.params.bind(g, &format!("{name}.beta"))?;
        g.group_norm(x, gamma, beta, NORM_GROUPS)
    }

    fn linear<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.params.bind(g, &format!("{name}.w"))?;
        let b = if bias {
            Some(self.params.bind(g, &format!("{name}.b"))?)
        } else {
            None
        };
        g.linear(x, w, b)
    }

    fn resblock<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, temb: Var, name: &str) -> Result<Var> {
        let h = self.norm_act(g, x, &format!("{name}.norm1"))?;
        let h = self.conv(g, h, &format!("{name}.conv1"), 1)?;
        let tb = self.linear(g, temb, &format!("{name}.temb"), true)?;
        let h = g.add_channel_bias(h, tb)?;
        let h = self.norm_act(g, h, &format!("{name}.norm2"))?;
        let h = self.conv(g, h, &format!("{name}.conv2"), 1)?;
        let skip = if self.params.contains(&format!("{name}.skip.w")) {
            self.conv(g, x, &format!("{name}.skip"), 1)?
        } else {
            x
        };
        g.add(h, skip)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_block<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        x: Var,
        name: &str,
        layout: &AttnLayout,
        prompt_tok: Var,
        null_tok: Var,
        routing: Routing,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let h = self.norm(g, x, &format!("{name}.norm"))?;
        let proj = |g: &mut Graph<'a, T>, p: &str| -> Result<Var> {
            let w = self.params.bind(g, &format!("{name}.{p}.w"))?;
            g.conv2d(h, w, None, 1, 0)
        };
        let (q, k, v) = (proj(g, "q")?, proj(g, "k")?, proj(g, "v")?);
        let a = g.self_attention(q, k, v, layout, heads, routing)?;
        let a = self.conv(g, a, &format!("{name}.out"), 1)?;
        let x = g.add(x, a)?;

        let h = self.norm(g, x, &format!("{name}.xnorm"))?;
        let wq = self.params.bind(g, &format!("{name}.xq.w"))?;
        let q = g.conv2d(h, wq, None, 1, 0)?;
        let pk = self.linear(g, prompt_tok, &format!("{name}.xk"), false)?;
        let pv = self.linear(g, prompt_tok, &format!("{name}.xv"), false)?;
        let nk = self.linear(g, null_tok, &format!("{name}.xk"), false)?;
        let nv = self.linear(g, null_tok, &format!("{name}.xv"), false)?;
        let a = g.cross_attention(q, pk, pv, nk, nv, &layout.masks, heads, routing)?;
        let a = self.conv(g, a, &format!("{name}.xout"), 1)?;
        g.add(x, a)
    }

    /// Builds the forward pass for a batch `z` of shape `[N, C, S, S]`.
    /// `groups` lists which batch items share self-attention sequences.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        z: Var,
        queries: &[EpsQuery<'_>],
        groups: &[Vec<usize>],
        routing: Routing,
    ) -> Result<Var> {
        let n = queries.len();
        let s = self.config.latent_size;
        if g.value(z).shape() != [n, self.config.latent_channels, s, s] {
            return Err(shape_err(format!(
                "latent batch {:?} for {n} queries",
                g.value(z).shape()
            )));
        }
        let masks = self.prepare_masks(queries)?;
        let mask_in = g.input(Tensor::new(
            &[n, 1, s, s],
            masks.input.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?);
        let layout8 = AttnLayout {
            masks: masks.tokens8,
            groups: groups.to_vec(),
        };
        let layout4 = AttnLayout {
            masks: masks.tokens4,
            groups: groups.to_vec(),
        };

        let ts: Vec<usize> = queries.iter().map(|q| q.t).collect();
        let temb = g.input(sinusoidal_embedding(&ts, TIME_EMBED_DIM));
        let temb = self.linear(g, temb, "temb.l1", true)?;
        let temb = g.silu(temb);
        let temb = self.linear(g, temb, "temb.l2", true)?;
        let temb = g.silu(temb);

        let table = self.params.bind(g, "class_emb")?;
        let classes: Vec<usize> = queries.iter().map(|q| q.prompt.0).collect();
        let prompt_tok = g.embedding(table, &classes)?;
        let null_tok = g.embedding(table, &vec![self.config.n_classes; n])?;

        let x = g.concat_channels(z, mask_in)?;
        let x = self.conv(g, x, "conv_in", 1)?;
        let s1 = self.resblock(g, x, temb, "d1")?;
        let x = self.conv(g, s1, "down1", 2)?;
        let x = self.resblock(g, x, temb, "d2")?;
        let s2 = self.attn_block(g, x, "d2.attn", &layout8, prompt_tok, null_tok, routing)?;
        let x = self.conv(g, s2, "down2", 2)?;
        let x = self.resblock(g, x, temb, "mid")?;
        let x = self.attn_block(g, x, "mid.attn", &layout4, prompt_tok, null_tok, routing)?;
        let x = g.upsample2(x)?;
        let x = g.concat_channels(x, s2)?;
        let x = self.resblock(g, x, temb, "u2")?;
        let x = self.attn_block(g, x, "u2.attn", &layout8, prompt_tok, null_tok, routing)?;
        let x = g.upsample2(x)?;
        let x = g.concat_channels(x, s1)?;
        let x = self.resblock(g, x, temb, "u1")?;
        let x = self.norm_act(g, x, "out.norm")?;
        self.conv(g, x, "out.conv", 1)
    }

    /// Batched inference: one eps prediction per query.
    pub fn predict_batch(
        &self,
        latents: &[&LatentTensor<T>],
        queries: &[EpsQuery<'_>],
        groups: &[Vec<usize>],
        routing: Routing,
    ) -> Result<Vec<LatentTensor<T>>> {
        if latents.len() != queries.len() || latents.is_empty() {
            return Err(shape_err("one latent per query is required"));
        }
        for z in latents {
            self.check_latent(z)?;
        }
        let mut shape = vec![latents.len()];
        shape.extend(self.latent_shape());
        let batch = Tensor::cat0(latents)?.reshape(&shape)?;
        let mut g = Graph::inference();
        let z = g.input(batch);
        let out = self.forward(&mut g, z, queries, groups, routing)?;
        let out = g.into_value(out);
        let per = out.len() / latents.len();
        out.into_data()
            .chunks(per)
            .map(|c| Tensor::new(&self.latent_shape(), c.to_vec()))
            .collect()
    }

    pub fn predict_eps(
        &self,
        z_t: &LatentTensor<T>,
        t: usize,
        prompt: PromptId,
        cond_mask: &CanvasMask,
    ) -> Result<LatentTensor<T>> {
        self.predict_eps_with(z_t, t, prompt, cond_mask, Routing::ShapeAdaptive)
    }

    pub fn predict_eps_with(
        &self,
        z_t: &LatentTensor<T>,
        t: usize,
        prompt: PromptId,
        cond_mask: &CanvasMask,
        routing: Routing,
    ) -> Result<LatentTensor<T>> {
        let q = EpsQuery {
            t,
            prompt,
            mask: cond_mask,
        };
        Ok(self
            .predict_batch(&[z_t], &[q], &[vec![0]], routing)?
            .remove(0))
    }

    /// Joint reference/target prediction; returns `(eps_ref, eps_tgt)`.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_eps_joint(
        &self,
        z_ref_t: &LatentTensor<T>,
        z_t: &LatentTensor<T>,
        t: usize,
        prompt: PromptId,
        mask_ref: &CanvasMask,
        mask_tgt: &CanvasMask,
    ) -> Result<(LatentTensor<T>, LatentTensor<T>)> {
        self.predict_eps_joint_with(z_ref_t, z_t, t, prompt, mask_ref, mask_tgt, ForwardOptions::default())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn predict_eps_joint_with(
        &self,
        z_ref_t: &LatentTensor<T>,
        z_t: &LatentTensor<T>,
        t: usize,
        prompt: PromptId,
        mask_ref: &CanvasMask,
        mask_tgt: &CanvasMask,
        opts: ForwardOptions,
    ) -> Result<(LatentTensor<T>, LatentTensor<T>)> {
        let queries = [
            EpsQuery {
                t,
                prompt,
                mask: mask_ref,
            },
            EpsQuery {
                t,
                prompt,
                mask: mask_tgt,
            },
        ];
        let groups = if opts.share_halves {
            vec![vec![0, 1]]
        } else {
            vec![vec![0], vec![1]]
        };
        let mut out = self.predict_batch(&[z_ref_t, z_t], &queries, &groups, opts.routing)?;
        let tgt = out.pop().expect("two outputs");
        let rf = out.pop().expect("two outputs");
        Ok((rf, tgt))
    }

    /// Named tensors for a checkpoint (weights, latent statistics and the
    /// architecture record).
    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(
            "meta.denoiser_config".to_string(),
            Tensor::new(&[7], self.config.to_vec()).expect("seven fields"),
        )];
        let c = self.config.latent_channels;
        out.push((
            "meta.latent_shift".into(),
            Tensor::new(&[c], self.latent_norm.shift.clone()).expect("channels"),
        ));
        out.push((
            "meta.latent_scale".into(),
            Tensor::new(&[c], self.latent_norm.scale.clone()).expect("channels"),
        ));
        out.extend(self.params.iter().map(|(k, v)| (k.clone(), v.cast())));
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        use crate::checkpoint::find;
        let config = DenoiserConfig::from_vec(find(tensors, "meta.denoiser_config")?.data())?;
        let template = Self::init(config, 0)?;
        let mut params = ParamStore::new();
        for (name, t) in template.params.iter() {
            let stored = find(tensors, name)?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.insert(name.clone(), stored.cast());
        }
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite denoiser weight".into()));
        }
        let latent_norm = LatentNorm {
            shift: find(tensors, "meta.latent_shift")?.data().to_vec(),
            scale: find(tensors, "meta.latent_scale")?.data().to_vec(),
        };
        Ok(Self {
            config,
            params,
            latent_norm,
        })
    }
}

/// Sinusoidal timestep features, `[N, dim]`: `sin` half then `cos` half.
pub fn sinusoidal_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp() * t as f64)
            .collect();
        data.extend(freqs.iter().map(|a| T::from_f64_lossy(a.sin())));
        data.extend(freqs.iter().map(|a| T::from_f64_lossy(a.cos())));
    }
    Tensor::new(&[ts.len(), dim], data).expect("sizes match")
}

/// A training example for the noise predictor.
#[derive(Clone, Debug)]
pub struct DenoiseSample<T> {
    pub z0: LatentTensor<T>,
    pub prompt: PromptId,
    pub mask: CanvasMask,
}

/// Loss and parameter gradients of one training batch. Timesteps, noise and
/// prompt dropout are all drawn from `rng_seed`.
pub fn batch_loss_and_grads<T: Scalar>(
    model: &DenoiserModel<T>,
    batch: &[DenoiseSample<T>],
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<(f64, std::collections::HashMap<String, Tensor<T>>)> {
    if batch.is_empty() {
        return Err(param_err("training batch is empty"));
    }
    let mut rng = rng_for(rng_seed, &[stream::TRAIN]);
    let n = batch.len();
    let mut zt = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n);
    for item in batch {
        model.check_latent(&item.z0)?;
        let t = rng.random_range(0..schedule.train_steps());
        let eps = Tensor::<T>::new(
            item.z0.shape(),
            (0..item.z0.len())
                .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
                .collect(),
        )?;
        let drop = rng.random_bool(PROMPT_DROP_PROB);
        let prompt = if drop { model.null_prompt() } else { item.prompt };
        zt.push(noise_with_alpha_bar(&item.z0, schedule.alpha_bar(Some(t)), &eps)?);
        target.push(eps);
        queries.push(EpsQuery {
            t,
            prompt,
            mask: &item.mask,
        });
    }
    let mut shape = vec![n];
    shape.extend(model.latent_shape());
    let zb = Tensor::cat0(&zt.iter().collect::<Vec<_>>())?.reshape(&shape)?;
    let tb = Tensor::cat0(&target.iter().collect::<Vec<_>>())?.reshape(&shape)?;
    let groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut g = Graph::training();
    let z = g.input(zb);
    let out = model.forward(&mut g, z, &queries, &groups, Routing::ShapeAdaptive)?;
    let loss = g.mse(out, tb)?;
    let lv = g.value(loss).data()[0].to_f64_lossy();
    let grads = g.backward(loss)?;
    Ok((lv, grads))
}

/// One optimizer update; returns the batch loss before the update.
pub fn training_step<T: Scalar>(
    model: &mut DenoiserModel<T>,
    optimizer: &mut Optimizer<T>,
    batch: &[DenoiseSample<T>],
    schedule: &NoiseSchedule,
    rng_seed: u64,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = batch_loss_and_grads(model, batch, schedule, rng_seed)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: optimizer.steps_taken(),
            loss,
        });
    }
    optimizer.apply(&mut model.params, &grads, lr)?;
    Ok(loss)
}
