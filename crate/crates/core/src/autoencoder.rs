//! Image autoencoder whose decoder takes the canvas mask as an extra input
//! channel and predicts an alpha layer as an extra output channel.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::canvas::{augment_mask, AlphaMask, AugmentMode, CanvasMask, RgbImage};
use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::{scaled_normal, Optimizer, ParamStore};
use crate::rng::{rng_for, stream};
use crate::scalar::Scalar;
use crate::schedule::LatentTensor;
use crate::tensor::Tensor;

const NORM_GROUPS: usize = 8;
/// Weight of the alpha term in the training loss.
pub const MASK_LOSS_WEIGHT: f64 = 1.0;
pub const AUGMENT_SIGMA: (f64, f64) = (1.0, 4.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    /// Widths at full, half and quarter resolution.
    pub channels: [usize; 3],
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_channels: 4,
            channels: [16, 32, 64],
        }
    }
}

impl AutoencoderConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(param_err("image size must be a positive multiple of 4"));
        }
        if self.latent_channels == 0 || self.channels.iter().any(|c| *c == 0 || c % NORM_GROUPS != 0) {
            return Err(param_err(format!(
                "autoencoder widths must be positive multiples of {NORM_GROUPS}"
            )));
        }
        Ok(())
    }

    fn to_vec(self) -> Vec<f32> {
        [
            self.image_size,
            self.latent_channels,
            self.channels[0],
            self.channels[1],
            self.channels[2],
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    fn from_vec(v: &[f32]) -> Result<Self> {
        if v.len() != 5 || v.iter().any(|x| *x < 0.0 || x.fract() != 0.0) {
            return Err(Error::Checkpoint("malformed autoencoder config tensor".into()));
        }
        let cfg = Self {
            image_size: v[0] as usize,
            latent_channels: v[1] as usize,
            channels: [v[2] as usize, v[3] as usize, v[4] as usize],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderModel<T> {
    pub config: AutoencoderConfig,
    pub params: ParamStore<T>,
}

/// Interleaved RGB to a `[3, H, W]` slice of values in `[-1, 1]`.
fn image_planes<T: Scalar>(img: &RgbImage, out: &mut Vec<T>) {
    let hw = img.width() * img.height();
    let start = out.len();
    out.resize(start + 3 * hw, T::zero());
    for (i, px) in img.data().chunks(3).enumerate() {
        for c in 0..3 {
            out[start + c * hw + i] = T::from_f64_lossy(2.0 * px[c] as f64 - 1.0);
        }
    }
}

fn rgb_planes<T: Scalar>(img: &RgbImage, out: &mut Vec<T>) {
    let hw = img.width() * img.height();
    let start = out.len();
    out.resize(start + 3 * hw, T::zero());
    for (i, px) in img.data().chunks(3).enumerate() {
        for c in 0..3 {
            out[start + c * hw + i] = T::from_f64_lossy(px[c] as f64);
        }
    }
}

/// Fraction of set pixels in each `factor x factor` block.
pub fn mask_coverage(mask: &CanvasMask, factor: usize) -> Result<Vec<f64>> {
    let (w, h) = (mask.width(), mask.height());
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(shape_err(format!("factor {factor} does not divide {w}x{h}")));
    }
    let (ow, oh) = (w / factor, h / factor);
    let mut out = vec![0.0; ow * oh];
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                out[(y / factor) * ow + x / factor] += 1.0;
            }
        }
    }
    let area = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

impl<T: Scalar> AutoencoderModel<T> {
    pub fn init(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[stream::INIT, 0xAE]);
        let mut p = ParamStore::new();
        let [c0, c1, c2] = config.channels;
        let lc = config.latent_channels;
        let mut conv = |p: &mut ParamStore<T>, name: &str, ci: usize, co: usize, gain: f64| {
            p.insert(format!("{name}.w"), scaled_normal(&[co, ci, 3, 3], ci * 9, gain, &mut rng));
            p.insert(format!("{name}.b"), Tensor::zeros(&[co]));
        };
        let norm = |p: &mut ParamStore<T>, name: &str, ch: usize| {
            p.insert(format!("{name}.gamma"), Tensor::full(&[ch], T::one()));
            p.insert(format!("{name}.beta"), Tensor::zeros(&[ch]));
        };
        conv(&mut p, "enc.in", 3, c0, 1.0);
        conv(&mut p, "enc.down1", c0, c1, 1.0);
        for (name, ch) in [("enc.r1", c1), ("enc.r2", c2), ("dec.r1", c2), ("dec.r2", c1)] {
            norm(&mut p, &format!("{name}.norm1"), ch);
            conv(&mut p, &format!("{name}.conv1"), ch, ch, 1.0);
            norm(&mut p, &format!("{name}.norm2"), ch);
            conv(&mut p, &format!("{name}.conv2"), ch, ch, 0.5);
        }
        conv(&mut p, "enc.down2", c1, c2, 1.0);
        norm(&mut p, "enc.out_norm", c2);
        conv(&mut p, "enc.out", c2, lc, 1.0);
        conv(&mut p, "dec.in", lc + 1, c2, 1.0);
        conv(&mut p, "dec.up1", c2, c1, 1.0);
        conv(&mut p, "dec.up2", c1, c0, 1.0);
        norm(&mut p, "dec.out_norm", c0);
        conv(&mut p, "dec.out", c0, 4, 1.0);
        Ok(Self { config, params: p })
    }

    fn conv<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.params.bind(g, &format!("{name}.w"))?;
        let b = self.params.bind(g, &format!("{name}.b"))?;
        g.conv2d(x, w, Some(b), stride, 1)
    }

    fn norm_act<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, name: &str) -> Result<Var> {
        let gamma = self.params.bind(g, &format!("{name}.gamma"))?;
        let beta = self.params.bind(g, &format!("{name}.beta"))?;
        let h = g.group_norm(x, gamma, beta, NORM_GROUPS)?;
        Ok(g.silu(h))
    }

    fn resblock<'a>(&'a self, g: &mut Graph<'a, T>, x: Var, name: &str) -> Result<Var> {
        let h = self.norm_act(g, x, &format!("{name}.norm1"))?;
        let h = self.conv(g, h, &format!("{name}.conv1"), 1)?;
        let h = self.norm_act(g, h, &format!("{name}.norm2"))?;
        let h = self.conv(g, h, &format!("{name}.conv2"), 1)?;
        g.add(x, h)
    }

    /// `[N, 3, S, S]` images in `[-1, 1]` to `[N, C, S/4, S/4]` latents.
    pub fn encoder_graph<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let h = self.conv(g, x, "enc.in", 1)?;
        let h = g.silu(h);
        let h = self.conv(g, h, "enc.down1", 2)?;
        let h = g.silu(h);
        let h = self.resblock(g, h, "enc.r1")?;
        let h = self.conv(g, h, "enc.down2", 2)?;
        let h = g.silu(h);
        let h = self.resblock(g, h, "enc.r2")?;
        let h = self.norm_act(g, h, "enc.out_norm")?;
        self.conv(g, h, "enc.out", 1)
    }

    /// Latents plus a `[N, 1, S/4, S/4]` mask channel to `[N, 4, S, S]`
    /// raw outputs (RGB, alpha logit).
    pub fn decoder_graph<'a>(&'a self, g: &mut Graph<'a, T>, z: Var, mask: Var) -> Result<Var> {
        let h = g.concat_channels(z, mask)?;
        let h = self.conv(g, h, "dec.in", 1)?;
        let h = self.resblock(g, h, "dec.r1")?;
        let h = g.upsample2(h)?;
        let h = self.conv(g, h, "dec.up1", 1)?;
        let h = self.resblock(g, h, "dec.r2")?;
        let h = g.upsample2(h)?;
        let h = self.conv(g, h, "dec.up2", 1)?;
        let h = self.norm_act(g, h, "dec.out_norm")?;
        self.conv(g, h, "dec.out", 1)
    }

    fn check_image(&self, img: &RgbImage) -> Result<()> {
        let s = self.config.image_size;
        if img.width() != s || img.height() != s {
            return Err(shape_err(format!(
                "image {}x{}, expected {s}x{s}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &CanvasMask) -> Result<()> {
        let s = self.config.image_size;
        if mask.width() != s || mask.height() != s {
            return Err(shape_err(format!(
                "mask {}x{}, expected {s}x{s}",
                mask.width(),
                mask.height()
            )));
        }
        Ok(())
    }

    fn latent_shape(&self) -> [usize; 3] {
        let l = self.config.latent_size();
        [self.config.latent_channels, l, l]
    }

    fn mask_input(&self, masks: &[&CanvasMask]) -> Result<Tensor<T>> {
        let l = self.config.latent_size();
        let mut data = Vec::with_capacity(masks.len() * l * l);
        for m in masks {
            self.check_mask(m)?;
            data.extend(mask_coverage(m, 4)?.into_iter().map(T::from_f64_lossy));
        }
        Tensor::new(&[masks.len(), 1, l, l], data)
    }

    pub fn encode_batch(&self, images: &[&RgbImage]) -> Result<Vec<LatentTensor<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let s = self.config.image_size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for img in images {
            self.check_image(img)?;
            image_planes(img, &mut data);
        }
        let mut g = Graph::inference();
        let x = g.input(Tensor::new(&[images.len(), 3, s, s], data)?);
        let z = self.encoder_graph(&mut g, x)?;
        let per: usize = self.latent_shape().iter().product();
        g.into_value(z)
            .into_data()
            .chunks(per)
            .map(|c| Tensor::new(&self.latent_shape(), c.to_vec()))
            .collect()
    }

    pub fn encode(&self, image: &RgbImage) -> Result<LatentTensor<T>> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn decode_svd_batch(
        &self,
        latents: &[&LatentTensor<T>],
        masks: &[&CanvasMask],
    ) -> Result<Vec<(RgbImage, AlphaMask)>> {
        if latents.len() != masks.len() {
            return Err(shape_err("one mask per latent is required"));
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for z in latents {
            if z.shape() != self.latent_shape() {
                return Err(shape_err(format!(
                    "latent {:?}, expected {:?}",
                    z.shape(),
                    self.latent_shape()
                )));
            }
        }
        let n = latents.len();
        let mut shape = vec![n];
        shape.extend(self.latent_shape());
        let zb = Tensor::cat0(latents)?.reshape(&shape)?;
        let mut g = Graph::inference();
        let z = g.input(zb);
        let m = g.input(self.mask_input(masks)?);
        let out = self.decoder_graph(&mut g, z, m)?;
        let out = g.into_value(out);
        let s = self.config.image_size;
        let hw = s * s;
        out.data()
            .chunks(4 * hw)
            .map(|item| {
                let mut rgb = vec![0f32; 3 * hw];
                for c in 0..3 {
                    for i in 0..hw {
                        rgb[i * 3 + c] = item[c * hw + i].to_f64_lossy().clamp(0.0, 1.0) as f32;
                    }
                }
                let alpha = item[3 * hw..]
                    .iter()
                    .map(|&v| crate::autograd::sigmoid(v).to_f64_lossy().clamp(0.0, 1.0) as f32)
                    .collect();
                Ok((RgbImage::new(s, s, rgb)?, AlphaMask::new(s, s, alpha)?))
            })
            .collect()
    }

    /// Decodes a latent under a condition mask into an image and an alpha
    /// layer.
    pub fn decode_svd(&self, z0: &LatentTensor<T>, cond_mask: &CanvasMask) -> Result<(RgbImage, AlphaMask)> {
        Ok(self.decode_svd_batch(&[z0], &[cond_mask])?.remove(0))
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(
            "meta.autoencoder_config".to_string(),
            Tensor::new(&[5], self.config.to_vec()).expect("five fields"),
        )];
        out.extend(self.params.iter().map(|(k, v)| (k.clone(), v.cast())));
        out
    }

    pub fn from_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        use crate::checkpoint::find;
        let config = AutoencoderConfig::from_vec(find(tensors, "meta.autoencoder_config")?.data())?;
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
            return Err(Error::Checkpoint("non-finite autoencoder weight".into()));
        }
        Ok(Self { config, params })
    }
}

/// `MSE(rgb, image) + weight * MSE(alpha, gt_mask)` over whole frames.
pub fn svd_loss(rgb: &RgbImage, alpha: &AlphaMask, image: &RgbImage, gt_mask: &CanvasMask) -> Result<f64> {
    if rgb.data().len() != image.data().len() || alpha.data().len() != gt_mask.data().len() {
        return Err(shape_err("prediction and target sizes differ"));
    }
    let rgb_mse = rgb
        .data()
        .iter()
        .zip(image.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / rgb.data().len() as f64;
    let alpha_mse = alpha
        .data()
        .iter()
        .zip(gt_mask.data())
        .map(|(&a, &m)| (a as f64 - m as f64).powi(2))
        .sum::<f64>()
        / alpha.data().len() as f64;
    Ok(rgb_mse + MASK_LOSS_WEIGHT * alpha_mse)
}

/// An autoencoder training example.
#[derive(Clone, Copy, Debug)]
pub struct AeSample<'d> {
    pub image: &'d RgbImage,
    pub gt_mask: &'d CanvasMask,
}

/// Loss and gradients of one batch; augmentation draws come from `rng_seed`.
pub fn ae_batch_loss_and_grads<T: Scalar>(
    model: &AutoencoderModel<T>,
    batch: &[AeSample<'_>],
    rng_seed: u64,
) -> Result<(f64, HashMap<String, Tensor<T>>)> {
    if batch.is_empty() {
        return Err(param_err("training batch is empty"));
    }
    let mut rng = rng_for(rng_seed, &[stream::TRAIN, 0xAE]);
    let s = model.config.image_size;
    let n = batch.len();
    let mut x = Vec::with_capacity(n * 3 * s * s);
    let mut rgb_t = Vec::with_capacity(n * 3 * s * s);
    let mut alpha_t = Vec::with_capacity(n * s * s);
    let mut augmented = Vec::with_capacity(n);
    for item in batch {
        model.check_image(item.image)?;
        model.check_mask(item.gt_mask)?;
        image_planes(item.image, &mut x);
        rgb_planes(item.image, &mut rgb_t);
        alpha_t.extend(item.gt_mask.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        let sigma = rng.random_range(AUGMENT_SIGMA.0..AUGMENT_SIGMA.1);
        let mode = if rng.random_bool(0.5) {
            AugmentMode::Expand
        } else {
            AugmentMode::Contract
        };
        augmented.push(augment_mask(item.gt_mask, sigma, mode)?);
    }
    let mut g = Graph::training();
    let xin = g.input(Tensor::new(&[n, 3, s, s], x)?);
    let m = g.input(model.mask_input(&augmented.iter().collect::<Vec<_>>())?);
    let z = model.encoder_graph(&mut g, xin)?;
    let out = model.decoder_graph(&mut g, z, m)?;
    let rgb = g.narrow_channels(out, 0, 3)?;
    let logit = g.narrow_channels(out, 3, 1)?;
    let alpha = g.sigmoid(logit);
    let l_rgb = g.mse(rgb, Tensor::new(&[n, 3, s, s], rgb_t)?)?;
    let l_alpha = g.mse(alpha, Tensor::new(&[n, 1, s, s], alpha_t)?)?;
    let l_alpha = g.scale(l_alpha, T::from_f64_lossy(MASK_LOSS_WEIGHT));
    let loss = g.add(l_rgb, l_alpha)?;
    let lv = g.value(loss).data()[0].to_f64_lossy();
    let grads = g.backward(loss)?;
    Ok((lv, grads))
}

pub fn ae_training_step<T: Scalar>(
    model: &mut AutoencoderModel<T>,
    optimizer: &mut Optimizer<T>,
    batch: &[AeSample<'_>],
    rng_seed: u64,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = ae_batch_loss_and_grads(model, batch, rng_seed)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: optimizer.steps_taken(),
            loss,
        });
    }
    optimizer.apply(&mut model.params, &grads, lr)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OptimizerKind;
    use crate::synthdata::make_triplet;

    fn small() -> AutoencoderConfig {
        AutoencoderConfig {
            channels: [8, 8, 16],
            ..AutoencoderConfig::default()
        }
    }

    #[test]
    fn shapes_ranges_and_determinism() {
        let ae = AutoencoderModel::<f32>::init(small(), 1).unwrap();
        let t = make_triplet(3).unwrap();
        let z = ae.encode(&t.image).unwrap();
        assert_eq!(z.shape(), &[4, 16, 16]);
        assert_eq!(z, ae.encode(&t.image).unwrap());
        let (rgb, alpha) = ae.decode_svd(&z, &t.mask).unwrap();
        let (rgb2, alpha2) = ae.decode_svd(&z, &t.mask).unwrap();
        assert_eq!((rgb.clone(), alpha.clone()), (rgb2, alpha2));
        assert!(rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(alpha.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ae.params.get("dec.in.w").unwrap().dim(1), 5);
        assert_eq!(ae.params.get("dec.out.w").unwrap().dim(0), 4);
        assert!(ae.encode(&RgbImage::white(32, 32)).is_err());
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut ae = AutoencoderModel::<f32>::init(small(), 2).unwrap();
        let t = make_triplet(4).unwrap();
        let before = ae.params.clone();
        let mut opt = Optimizer::new(OptimizerKind::adam());
        let batch = [AeSample {
            image: &t.image,
            gt_mask: &t.mask,
        }];
        let loss = ae_training_step(&mut ae, &mut opt, &batch, 0, 0.0).unwrap();
        assert!(loss.is_finite());
        assert_eq!(ae.params, before);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let t = make_triplet(5).unwrap();
        let alpha = AlphaMask::new(64, 64, t.mask.data().iter().map(|&v| v as f32).collect()).unwrap();
        assert_eq!(svd_loss(&t.image, &alpha, &t.image, &t.mask).unwrap(), 0.0);
    }

    #[test]
    fn coverage_is_block_fraction() {
        let m = CanvasMask::from_fn(8, 8, |x, y| x < 2 && y < 4);
        let c = mask_coverage(&m, 4).unwrap();
        assert_eq!(c, vec![0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn checkpoint_tensors_round_trip() {
        let ae = AutoencoderModel::<f32>::init(small(), 7).unwrap();
        assert_eq!(AutoencoderModel::<f32>::from_tensors(&ae.to_tensors()).unwrap(), ae);
    }
}
