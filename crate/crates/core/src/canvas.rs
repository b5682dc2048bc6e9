//! Irregular canvases: binary masks inside a rectangular frame, alpha layers,
//! RGB images, procedural mask generation and compositing.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, Rgba};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::attention::TokenMask;
use crate::error::{param_err, shape_err, Error, Result};
use crate::rng::{rng_for, stream};

/// Smallest frame side accepted for a generation condition.
pub const MIN_CONDITION_SIDE: usize = 8;

/// Binary raster of an irregular canvas, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CanvasMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl CanvasMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(param_err(format!(
                "mask value {} at ({}, {}) is not binary",
                data[i],
                i % width,
                i / width
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![u8::from(value); width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the foreground.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Checks the invariants required of a mask used as a generation
    /// condition: minimum frame size and both foreground and background
    /// present.
    pub fn validate_condition(&self) -> Result<()> {
        if self.width < MIN_CONDITION_SIDE || self.height < MIN_CONDITION_SIDE {
            return Err(param_err(format!(
                "condition mask {}x{} is smaller than {m}x{m}",
                self.width,
                self.height,
                m = MIN_CONDITION_SIDE
            )));
        }
        let fg = self.foreground_count();
        if fg == 0 {
            return Err(Error::DegeneratePartition("mask has no foreground".into()));
        }
        if fg == self.data.len() {
            return Err(Error::DegeneratePartition("mask has no background".into()));
        }
        Ok(())
    }

    /// Intersection over union against another mask of the same frame.
    pub fn iou(&self, other: &Self) -> Result<f64> {
        self.check_dims(other.width, other.height)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        Ok(if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        })
    }

    /// Flattened row-major token mask.
    pub fn to_token_mask(&self) -> TokenMask {
        TokenMask::new(self.data.iter().map(|&v| v == 1).collect())
    }

    /// Width-wise concatenation `[self | right]`.
    pub fn hconcat(&self, right: &Self) -> Result<Self> {
        if self.height != right.height {
            return Err(shape_err("hconcat needs equal heights"));
        }
        let w = self.width + right.width;
        let mut data = Vec::with_capacity(w * self.height);
        for y in 0..self.height {
            data.extend_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
            data.extend_from_slice(&right.data[y * right.width..(y + 1) * right.width]);
        }
        Ok(Self {
            width: w,
            height: self.height,
            data,
        })
    }

    /// Number of 4-connected foreground components.
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % self.width, i / self.width);
                let mut visit = |j: usize| {
                    if self.data[j] == 1 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < self.width {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - self.width);
                }
                if y + 1 < self.height {
                    visit(i + self.width);
                }
            }
        }
        count
    }

    fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(shape_err(format!(
                "mask is {}x{}, expected {}x{}",
                self.width, self.height, width, height
            )));
        }
        Ok(())
    }
}

/// Per-pixel opacity in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMask {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl AlphaMask {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(shape_err(format!(
                "{}x{} alpha needs {} values, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(param_err("alpha values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Binary mask of pixels with alpha `>= threshold`.
    pub fn threshold(&self, threshold: f32) -> CanvasMask {
        CanvasMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&a| u8::from(a >= threshold)).collect(),
        }
    }
}

/// RGB image with channels in `[0, 1]`, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape_err(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(param_err("RGB values must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn white(width: usize, height: usize) -> Self {
        Self::solid(width, height, [1.0; 3])
    }

    pub fn solid(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    /// Builds an image from a per-pixel function; values are clamped.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Even-odd test of a point against a closed polygon.
fn inside_even_odd(vertices: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut inside = false;
    let n = vertices.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Rasterizes a polygon: a pixel is set iff its center lies inside under the
/// even-odd rule.
pub fn rasterize_polygon(vertices: &[(f64, f64)], width: usize, height: usize) -> Result<CanvasMask> {
    if vertices.len() < 3 {
        return Err(Error::InvalidGeometry(format!(
            "polygon needs at least 3 vertices, got {}",
            vertices.len()
        )));
    }
    if vertices.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::InvalidGeometry("non-finite vertex".into()));
    }
    Ok(CanvasMask::from_fn(width, height, |x, y| {
        inside_even_odd(vertices, x as f64 + 0.5, y as f64 + 0.5)
    }))
}

/// Inverse CDF of `Beta(a, b)` by bisection on the regularized incomplete
/// beta function.
pub fn beta_inv_cdf(a: f64, b: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < u {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Aspect ratio as a function of the Beta(1.5, 1.5) draw `x`.
pub fn aspect_ratio_from_beta(x: f64) -> f64 {
    let num = (1.0 - 0.3 * (0.5 - x)).min(1.0);
    let den = (1.0 - 0.3 * (x - 0.5)).min(1.0);
    num / den
}

/// Aspect ratio for a uniform draw `u`, via `X ~ Beta(1.5, 1.5)`.
pub fn sample_aspect_ratio(u: f64) -> f64 {
    aspect_ratio_from_beta(beta_inv_cdf(1.5, 1.5, u))
}

/// Resize scale as a function of the Beta(5, 5) draw `y`.
pub fn resize_scale_from_beta(y: f64) -> f64 {
    1.0 - 0.4 * y
}

/// Resize scale in `[0.6, 1.0]` for a uniform draw `u`, via `Y ~ Beta(5, 5)`.
pub fn sample_resize_scale(u: f64) -> f64 {
    resize_scale_from_beta(beta_inv_cdf(5.0, 5.0, u))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Glyphlike,
}

/// Centered ellipse or rectangle with aspect ratio `ratio` (width / height)
/// and size `scale` relative to the inscribed square of the frame.
pub fn centered_shape(
    family: ShapeFamily,
    ratio: f64,
    scale: f64,
    width: usize,
    height: usize,
) -> Result<CanvasMask> {
    let side = scale * width.min(height) as f64;
    let half_w = 0.5 * side * ratio.min(1.0);
    let half_h = 0.5 * side * (1.0 / ratio).min(1.0);
    let (cx, cy) = (0.5 * width as f64, 0.5 * height as f64);
    match family {
        ShapeFamily::Rectangle => rasterize_polygon(
            &[
                (cx - half_w, cy - half_h),
                (cx + half_w, cy - half_h),
                (cx + half_w, cy + half_h),
                (cx - half_w, cy + half_h),
            ],
            width,
            height,
        ),
        ShapeFamily::Ellipse => Ok(CanvasMask::from_fn(width, height, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / half_w;
            let dy = (y as f64 + 0.5 - cy) / half_h;
            dx * dx + dy * dy <= 1.0
        })),
        ShapeFamily::Glyphlike => Err(param_err(
            "glyphlike masks are stroke unions, not centered shapes",
        )),
    }
}

/// Axis-aligned stroke `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug)]
struct Stroke {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

fn glyphlike_mask<R: Rng>(rng: &mut R, width: usize, height: usize) -> CanvasMask {
    let margin_x = (width / 16).max(1);
    let margin_y = (height / 16).max(1);
    let (lo_x, hi_x) = (margin_x, width - margin_x);
    let (lo_y, hi_y) = (margin_y, height - margin_y);
    let span = width.min(height) as f64;
    let n_strokes = rng.random_range(2..=5);
    let mut strokes: Vec<Stroke> = Vec::with_capacity(n_strokes);
    for i in 0..n_strokes {
        let thick = (span * rng.random_range(0.10..0.22)).round().max(2.0) as usize;
        let len = (span * rng.random_range(0.45..0.85)).round() as usize;
        let vertical = rng.random_bool(0.5);
        // anchor point: frame interior for the first stroke, a point inside
        // an existing stroke afterwards so the union stays connected
        let (px, py) = if i == 0 {
            (
                rng.random_range(lo_x + thick..hi_x - thick),
                rng.random_range(lo_y + thick..hi_y - thick),
            )
        } else {
            let s = strokes[rng.random_range(0..strokes.len())];
            (rng.random_range(s.x0..s.x1), rng.random_range(s.y0..s.y1))
        };
        let (along_lo, along_hi, across_lo, across_hi, p_along, p_across) = if vertical {
            (lo_y, hi_y, lo_x, hi_x, py, px)
        } else {
            (lo_x, hi_x, lo_y, hi_y, px, py)
        };
        let back = rng.random_range(0..len);
        let a0 = p_along.saturating_sub(back).max(along_lo);
        let a1 = (p_along + (len - back)).min(along_hi).max(p_along + 1);
        let c0 = p_across.saturating_sub(thick / 2).max(across_lo);
        let c1 = (c0 + thick).min(across_hi).max(p_across + 1);
        strokes.push(if vertical {
            Stroke {
                x0: c0,
                y0: a0,
                x1: c1,
                y1: a1,
            }
        } else {
            Stroke {
                x0: a0,
                y0: c0,
                x1: a1,
                y1: c1,
            }
        });
    }
    CanvasMask::from_fn(width, height, |x, y| {
        strokes
            .iter()
            .any(|s| x >= s.x0 && x < s.x1 && y >= s.y0 && y < s.y1)
    })
}

/// Seeded procedural canvas mask.
///
/// Ellipses and rectangles are centered, with aspect ratio from
/// [`sample_aspect_ratio`] and size from [`sample_resize_scale`]. Glyphlike
/// masks are a connected union of 2 to 5 axis-aligned strokes.
pub fn generate_canvas_mask(
    seed: u64,
    width: usize,
    height: usize,
    family: ShapeFamily,
) -> Result<CanvasMask> {
    if width < MIN_CONDITION_SIDE || height < MIN_CONDITION_SIDE {
        return Err(param_err(format!(
            "frame {width}x{height} is below the {MIN_CONDITION_SIDE}px minimum"
        )));
    }
    let mut rng = rng_for(seed, &[stream::CANVAS]);
    // Redraw in the (measure-zero in the continuum, possible after pixel
    // rounding) event that the shape fills or misses the whole frame.
    loop {
        let mask = match family {
            ShapeFamily::Glyphlike => glyphlike_mask(&mut rng, width, height),
            _ => {
                let r = sample_aspect_ratio(rng.random::<f64>());
                let s = sample_resize_scale(rng.random::<f64>());
                centered_shape(family, r, s, width, height)?
            }
        };
        if mask.validate_condition().is_ok() {
            return Ok(mask);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    Expand,
    Contract,
}

/// Values of a blurred binary mask closer than this to 0 or 1 count as
/// exactly 0 or 1; everything strictly between is an intermediate value.
pub const INTERMEDIATE_EPS: f64 = 1e-9;

/// Normalized 1-D Gaussian kernel with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    k
}

/// Separable Gaussian blur of a binary mask with zero padding outside the
/// frame.
pub fn gaussian_blur_mask(mask: &CanvasMask, sigma: f64) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src: Vec<f64> = mask.data.iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Expands or contracts a mask inside its bounding box: the mask is blurred
/// with standard deviation `sigma`, then intermediate values map to 1
/// (expand) or 0 (contract). Pixels outside the bounding box are unchanged.
pub fn augment_mask(mask: &CanvasMask, sigma: f64, mode: AugmentMode) -> Result<CanvasMask> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(param_err(format!("blur sigma {sigma} must be finite and >= 0")));
    }
    let Some((x0, y0, x1, y1)) = mask.bounding_box() else {
        return Ok(mask.clone());
    };
    if sigma == 0.0 {
        return Ok(mask.clone());
    }
    let blurred = gaussian_blur_mask(mask, sigma);
    let mut out = mask.clone();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let b = blurred[y * mask.width + x];
            let v = if b <= INTERMEDIATE_EPS {
                false
            } else if b >= 1.0 - INTERMEDIATE_EPS {
                true
            } else {
                mode == AugmentMode::Expand
            };
            out.set(x, y, v);
        }
    }
    Ok(out)
}

/// Keeps the image where the mask is set and paints pure white elsewhere.
pub fn crop_paste_white(image: &RgbImage, mask: &CanvasMask) -> Result<RgbImage> {
    mask.check_dims(image.width, image.height)?;
    let mut out = image.clone();
    for (px, &m) in out.data.chunks_mut(3).zip(&mask.data) {
        if m == 0 {
            px.fill(1.0);
        }
    }
    Ok(out)
}

/// Block downsampling: an output pixel is set iff the mean of its
/// `factor x factor` block is at least 0.5.
pub fn downsample_mask(mask: &CanvasMask, factor: usize) -> Result<CanvasMask> {
    if factor == 0 || !mask.width.is_multiple_of(factor) || !mask.height.is_multiple_of(factor) {
        return Err(shape_err(format!(
            "factor {} does not divide {}x{}",
            factor, mask.width, mask.height
        )));
    }
    let (w, h) = (mask.width / factor, mask.height / factor);
    let area = factor * factor;
    Ok(CanvasMask::from_fn(w, h, |x, y| {
        let mut ones = 0;
        for dy in 0..factor {
            for dx in 0..factor {
                ones += mask.data[(y * factor + dy) * mask.width + x * factor + dx] as usize;
            }
        }
        2 * ones >= area
    }))
}

/// Mean per-pixel distance from white (channel mean of `1 - v`) over pixels
/// where `region` is set. Returns 0 for an empty region.
pub fn distance_from_white(image: &RgbImage, region: &CanvasMask) -> Result<f64> {
    region.check_dims(image.width, image.height)?;
    let mut acc = 0.0;
    let mut n = 0usize;
    for (px, &m) in image.data.chunks(3).zip(&region.data) {
        if m == 1 {
            acc += px.iter().map(|&v| 1.0 - v as f64).sum::<f64>() / 3.0;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// PSNR in dB over pixels where `region` is set (peak value 1).
pub fn masked_psnr(a: &RgbImage, b: &RgbImage, region: &CanvasMask) -> Result<f64> {
    region.check_dims(a.width, a.height)?;
    region.check_dims(b.width, b.height)?;
    let mut se = 0.0;
    let mut n = 0usize;
    for ((pa, pb), &m) in a.data.chunks(3).zip(b.data.chunks(3)).zip(&region.data) {
        if m == 1 {
            for c in 0..3 {
                let d = pa[c] as f64 - pb[c] as f64;
                se += d * d;
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(param_err("PSNR over an empty region"));
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8-bit single-channel mask PNG (0 = background, 255 = foreground).
pub fn load_mask_png(path: &Path) -> Result<CanvasMask> {
    let shown = path.display().to_string();
    let img = image::ImageReader::open(path)?.decode()?;
    let DynamicImage::ImageLuma8(gray) = img else {
        return Err(Error::InvalidMask {
            path: shown,
            reason: format!("expected 8-bit single-channel PNG, got {:?}", img.color()),
        });
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for (i, &v) in gray.as_raw().iter().enumerate() {
        data.push(match v {
            0 => 0,
            255 => 1,
            other => {
                return Err(Error::InvalidMask {
                    path: shown,
                    reason: format!(
                        "pixel ({}, {}) has value {other}; only 0 and 255 are allowed",
                        i % w,
                        i / w
                    ),
                })
            }
        });
    }
    CanvasMask::new(w, h, data)
}

pub fn save_mask_png(mask: &CanvasMask, path: &Path) -> Result<()> {
    let buf: GrayImage = ImageBuffer::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.data.iter().map(|&v| v * 255).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn load_alpha_png(path: &Path) -> Result<AlphaMask> {
    let gray = image::ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    AlphaMask::new(w, h, gray.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
}

pub fn save_alpha_png(alpha: &AlphaMask, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        alpha.width as u32,
        alpha.height as u32,
        alpha.data.iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let rgb = image::ImageReader::open(path)?.decode()?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    RgbImage::new(w, h, rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect())
}

pub fn save_rgb_png(image: &RgbImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        image.width as u32,
        image.height as u32,
        image.data.iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Writes RGB from `image` and A from `alpha` as an RGBA PNG.
pub fn save_rgba_png(image: &RgbImage, alpha: &AlphaMask, path: &Path) -> Result<()> {
    if image.width != alpha.width || image.height != alpha.height {
        return Err(shape_err("image and alpha dimensions differ"));
    }
    let mut raw = Vec::with_capacity(image.width * image.height * 4);
    for (px, &a) in image.data.chunks(3).zip(&alpha.data) {
        raw.extend(px.iter().map(|&v| to_u8(v)));
        raw.push(to_u8(a));
    }
    let buf: ImageBuffer<Rgba<u8>, Vec<u8>> =
        ImageBuffer::from_raw(image.width as u32, image.height as u32, raw)
            .expect("buffer length matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// `image * alpha + white * (1 - alpha)`.
pub fn composite_over_white(image: &RgbImage, alpha: &AlphaMask) -> Result<RgbImage> {
    if image.width != alpha.width || image.height != alpha.height {
        return Err(shape_err("image and alpha dimensions differ"));
    }
    let mut out = image.clone();
    for (px, &a) in out.data.chunks_mut(3).zip(&alpha.data) {
        px.iter_mut().for_each(|v| *v = *v * a + (1.0 - a));
    }
    Ok(out)
}

/// Side-by-side strip of equally tall images.
pub fn hstack(images: &[&RgbImage]) -> Result<RgbImage> {
    let h = images.first().map_or(0, |i| i.height);
    if images.iter().any(|i| i.height != h) {
        return Err(shape_err("images differ in height"));
    }
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for img in images {
            data.extend_from_slice(&img.data[y * img.width * 3..(y + 1) * img.width * 3]);
        }
    }
    RgbImage::new(w, h, data)
}

/// Quantizes to 8 bits per channel and back, matching a PNG round trip.
pub fn quantize_rgb(image: &RgbImage) -> RgbImage {
    RgbImage {
        width: image.width,
        height: image.height,
        data: image.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
    }
}
