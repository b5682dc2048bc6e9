//! Procedural training triplets: a canvas mask, a texture pasted inside it
//! on white, and the texture's class label.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderModel;
use crate::canvas::{
    crop_paste_white, generate_canvas_mask, load_mask_png, load_rgb_png, quantize_rgb,
    save_mask_png, save_rgb_png, CanvasMask, RgbImage, ShapeFamily,
};
use crate::denoiser::PromptId;
use crate::error::{param_err, Error, Result};
use crate::rng::{derive_seed, rng_for, stream};
use crate::scalar::Scalar;
use crate::schedule::LatentTensor;

pub const IMAGE_SIZE: usize = 64;
pub const N_CLASSES: usize = 8;
/// A pixel counts as non-white when some channel is below this value.
pub const NON_WHITE_BELOW: f32 = 0.98;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureClass {
    Stripes,
    Dots,
    Checker,
    Rings,
    NoiseBlobs,
    Gradient,
    Bricks,
    Waves,
}

impl TextureClass {
    pub const ALL: [TextureClass; N_CLASSES] = [
        TextureClass::Stripes,
        TextureClass::Dots,
        TextureClass::Checker,
        TextureClass::Rings,
        TextureClass::NoiseBlobs,
        TextureClass::Gradient,
        TextureClass::Bricks,
        TextureClass::Waves,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| param_err(format!("texture class {id} outside [0, {N_CLASSES})")))
    }

    pub fn name(self) -> &'static str {
        match self {
            TextureClass::Stripes => "stripes",
            TextureClass::Dots => "dots",
            TextureClass::Checker => "checker",
            TextureClass::Rings => "rings",
            TextureClass::NoiseBlobs => "noise_blobs",
            TextureClass::Gradient => "gradient",
            TextureClass::Bricks => "bricks",
            TextureClass::Waves => "waves",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| param_err(format!("unknown texture class `{name}`")))
    }

    /// Centre of the class's hue family, in degrees.
    fn hue(self) -> f64 {
        45.0 * self.id() as f64
    }

    pub fn prompt(self) -> PromptId {
        PromptId(self.id())
    }
}

/// Stripe direction as an integer step; stripes are level sets of
/// `x * dx + y * dy`.
pub const STRIPE_DIRECTIONS: [(i64, i64); 4] = [(1, 0), (0, 1), (1, 1), (1, -1)];

/// Generator parameters drawn for one texture.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureParams {
    pub class: TextureClass,
    pub primary: [f32; 3],
    pub secondary: [f32; 3],
    /// Integer period in pixels.
    pub period: usize,
    pub phase: usize,
    /// Index into [`STRIPE_DIRECTIONS`], also used as a coarse angle.
    pub direction: usize,
    pub center: (f64, f64),
    noise_seed: u64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

impl TextureParams {
    pub fn sample(class: TextureClass, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[stream::TEXTURE, class.id() as u64]);
        let h = class.hue() + rng.random_range(-8.0..8.0);
        let primary = hsv(h, rng.random_range(0.65..0.95), rng.random_range(0.45..0.75));
        let secondary = hsv(
            h + rng.random_range(10.0..20.0),
            rng.random_range(0.35..0.6),
            rng.random_range(0.8..0.92),
        );
        let period = rng.random_range(10..=20);
        Self {
            class,
            primary,
            secondary,
            period,
            phase: rng.random_range(0..period),
            direction: rng.random_range(0..STRIPE_DIRECTIONS.len()),
            center: (rng.random_range(16.0..48.0), rng.random_range(16.0..48.0)),
            noise_seed: rng.random(),
        }
    }
}

fn mix(a: [f32; 3], b: [f32; 3], t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) as f32;
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Smooth value noise in `[0, 1]` with lattice spacing `cell`.
fn value_noise(seed: u64, cell: f64, x: f64, y: f64) -> f64 {
    let lattice = |i: i64, j: i64| -> f64 {
        let h = derive_seed(seed, &[i as u64, j as u64]);
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let (fx, fy) = (x / cell, y / cell);
    let (i, j) = (fx.floor() as i64, fy.floor() as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(fx - i as f64), smooth(fy - j as f64));
    let top = lattice(i, j) * (1.0 - tx) + lattice(i + 1, j) * tx;
    let bottom = lattice(i, j + 1) * (1.0 - tx) + lattice(i + 1, j + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

pub fn render_with(p: &TextureParams, width: usize, height: usize) -> RgbImage {
    let period = p.period as i64;
    let pf = p.period as f64;
    let (dx, dy) = STRIPE_DIRECTIONS[p.direction];
    let angle = std::f64::consts::FRAC_PI_4 * p.direction as f64;
    RgbImage::from_fn(width, height, |x, y| {
        let (xi, yi) = (x as i64, y as i64);
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        match p.class {
            TextureClass::Stripes => {
                let s = (xi * dx + yi * dy + p.phase as i64).rem_euclid(period);
                if 2 * s < period {
                    p.primary
                } else {
                    p.secondary
                }
            }
            TextureClass::Dots => {
                let cx = ((xi + p.phase as i64).rem_euclid(period)) as f64 + 0.5 - pf / 2.0;
                let cy = ((yi + p.phase as i64).rem_euclid(period)) as f64 + 0.5 - pf / 2.0;
                if cx * cx + cy * cy <= (0.3 * pf) * (0.3 * pf) {
                    p.primary
                } else {
                    p.secondary
                }
            }
            TextureClass::Checker => {
                let half = (period / 2).max(1);
                let a = (xi + p.phase as i64).div_euclid(half);
                let b = (yi + p.phase as i64).div_euclid(half);
                if (a + b).rem_euclid(2) == 0 {
                    p.primary
                } else {
                    p.secondary
                }
            }
            TextureClass::Rings => {
                let r = ((xf - p.center.0).powi(2) + (yf - p.center.1).powi(2)).sqrt();
                if (r / pf + p.phase as f64 / pf).fract() < 0.5 {
                    p.primary
                } else {
                    p.secondary
                }
            }
            TextureClass::NoiseBlobs => {
                let n = value_noise(p.noise_seed, pf, xf, yf);
                mix(p.primary, p.secondary, (n - 0.5) * 4.0 + 0.5)
            }
            TextureClass::Gradient => {
                let (c, s) = (angle.cos(), angle.sin());
                let span = (width.max(height)) as f64;
                let u = ((xf - width as f64 / 2.0) * c + (yf - height as f64 / 2.0) * s) / span + 0.5;
                mix(p.primary, p.secondary, u)
            }
            TextureClass::Bricks => {
                let row_h = (period / 2).max(2);
                let row = yi.div_euclid(row_h);
                let offset = if row % 2 == 0 { 0 } else { period / 2 };
                let bx = (xi + offset + p.phase as i64).rem_euclid(period);
                let by = yi.rem_euclid(row_h);
                if bx < 2 || by < 2 {
                    p.secondary
                } else {
                    p.primary
                }
            }
            TextureClass::Waves => {
                let (c, s) = (angle.cos(), angle.sin());
                let u = xf * c + yf * s;
                let v = -xf * s + yf * c;
                let w = (std::f64::consts::TAU * (u + 0.25 * pf * (std::f64::consts::TAU * v / (2.0 * pf)).sin()) / pf).sin();
                mix(p.primary, p.secondary, 0.5 + 0.5 * w)
            }
        }
    })
}

/// Deterministic full-frame texture of `class`.
pub fn render_texture(class: TextureClass, seed: u64, width: usize, height: usize) -> RgbImage {
    render_with(&TextureParams::sample(class, seed), width, height)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub mask: CanvasMask,
    pub image: RgbImage,
    pub label: TextureClass,
    pub seed: u64,
}

impl Triplet {
    /// Checks both triplet invariants: white outside the mask, non-white on
    /// at least 30% of the mask.
    pub fn check(&self) -> Result<()> {
        let mut inside = 0usize;
        let mut colored = 0usize;
        for (px, &m) in self.image.data().chunks(3).zip(self.mask.data()) {
            if m == 0 {
                if px.iter().any(|&v| v != 1.0) {
                    return Err(param_err("triplet image is not white outside its mask"));
                }
            } else {
                inside += 1;
                colored += usize::from(px.iter().any(|&v| v < NON_WHITE_BELOW));
            }
        }
        if 10 * colored < 3 * inside {
            return Err(param_err("triplet texture is mostly white inside its mask"));
        }
        Ok(())
    }
}

pub fn sample_family(u: f64) -> ShapeFamily {
    if u < 0.4 {
        ShapeFamily::Ellipse
    } else if u < 0.6 {
        ShapeFamily::Rectangle
    } else {
        ShapeFamily::Glyphlike
    }
}

pub fn make_triplet(seed: u64) -> Result<Triplet> {
    let mut rng = rng_for(seed, &[stream::TRIPLET]);
    let family = sample_family(rng.random::<f64>());
    let label = TextureClass::from_id(rng.random_range(0..N_CLASSES))?;
    let mask = generate_canvas_mask(rng.random(), IMAGE_SIZE, IMAGE_SIZE, family)?;
    let texture = render_texture(label, rng.random(), IMAGE_SIZE, IMAGE_SIZE);
    let image = quantize_rgb(&crop_paste_white(&texture, &mask)?);
    Ok(Triplet {
        mask,
        image,
        label,
        seed,
    })
}

/// Seed of item `index` of a dataset generated from `seed`.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[stream::TRIPLET, index as u64])
}

pub fn generate_dataset(seed: u64, size: usize) -> Result<Vec<Triplet>> {
    (0..size).map(|i| make_triplet(item_seed(seed, i))).collect()
}

/// Encodes every triplet image; order is preserved.
pub fn encode_dataset<T: Scalar>(
    triplets: &[Triplet],
    ae: &AutoencoderModel<T>,
) -> Result<Vec<(LatentTensor<T>, PromptId, CanvasMask)>> {
    triplets
        .iter()
        .map(|t| Ok((ae.encode(&t.image)?, t.label.prompt(), t.mask.clone())))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub seed: u64,
    pub class_id: usize,
    pub class_name: String,
}

pub const MANIFEST: &str = "manifest.jsonl";

pub fn image_path(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("{index:06}_img.png"))
}

pub fn mask_path(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("{index:06}_mask.png"))
}

pub fn write_dataset(dir: &Path, triplets: &[Triplet]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join(MANIFEST))?);
    for (i, t) in triplets.iter().enumerate() {
        save_rgb_png(&t.image, &image_path(dir, i))?;
        save_mask_png(&t.mask, &mask_path(dir, i))?;
        let rec = ManifestRecord {
            index: i,
            seed: t.seed,
            class_id: t.label.id(),
            class_name: t.label.name().to_string(),
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Triplet>> {
    read_manifest(dir)?
        .into_iter()
        .map(|rec| {
            let label = TextureClass::from_id(rec.class_id)?;
            if label.name() != rec.class_name {
                return Err(Error::Parameter(format!(
                    "manifest item {} names class `{}` but id {}",
                    rec.index, rec.class_name, rec.class_id
                )));
            }
            Ok(Triplet {
                mask: load_mask_png(&mask_path(dir, rec.index))?,
                image: load_rgb_png(&image_path(dir, rec.index))?,
                label,
                seed: rec.seed,
            })
        })
        .collect()
}
