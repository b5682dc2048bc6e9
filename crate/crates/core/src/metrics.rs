//! Embedding-based scores: masked interior/exterior similarity to a class
//! prototype and pairwise style consistency across a glyph set.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::canvas::{crop_paste_white, AlphaMask, CanvasMask, RgbImage};
use crate::denoiser::PromptId;
use crate::error::{param_err, Error, Result};
use crate::synthdata::{Triplet, N_CLASSES};

pub const COLOR_BINS: usize = 4;
pub const GRAD_BINS: usize = 8;
pub const EMBED_DIM: usize = COLOR_BINS * COLOR_BINS * COLOR_BINS + 2 * GRAD_BINS;
pub const MIN_PROTOTYPE_MEMBERS: usize = 16;

/// A feature vector, unit length unless `degenerate` (then all zeros).
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub data: Vec<f64>,
    pub degenerate: bool,
}

impl Embedding {
    /// L2-normalises `raw`; a zero vector stays zero and is flagged.
    pub fn normalized(raw: Vec<f64>) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Self {
                data: vec![0.0; raw.len()],
                degenerate: true,
            };
        }
        Self {
            data: raw.into_iter().map(|v| v / norm).collect(),
            degenerate: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    /// Dot product, clamped to `[-1, 1]`; zero against a degenerate side
    /// and exactly 1 for identical non-degenerate vectors.
    pub fn cosine(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        if !self.degenerate && self.data == other.data {
            return 1.0;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .clamp(-1.0, 1.0)
    }
}

pub trait Embedder {
    fn embed(&self, image: &RgbImage) -> Embedding;
}

/// Colour histogram plus gradient magnitude and orientation histograms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HistoGrad;

impl Embedder for HistoGrad {
    fn embed(&self, image: &RgbImage) -> Embedding {
        histograd_embed(image)
    }
}

/// Uniform bin of `v` over `[0, 1]`; values at or above 1 land in the last
/// bin and negatives in the first.
fn unit_bin(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn histograd_embed(image: &RgbImage) -> Embedding {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let mut raw = vec![0.0f64; EMBED_DIM];
    if n == 0 {
        return Embedding::normalized(raw);
    }
    let px = image.data();
    for p in px.chunks(3) {
        let [r, g, b] = [p[0], p[1], p[2]].map(|v| unit_bin(v as f64, COLOR_BINS));
        raw[(r * COLOR_BINS + g) * COLOR_BINS + b] += 1.0;
    }
    for v in &mut raw[..64] {
        *v /= n as f64;
    }

    let gray: Vec<f64> = px
        .chunks(3)
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect();
    let at = |x: usize, y: usize| gray[y * w + x];
    let (mag_off, ori_off) = (64, 64 + GRAD_BINS);
    let mut total_mag = 0.0;
    for y in 0..h {
        for x in 0..w {
            let gx = at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y);
            let gy = at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1));
            let mag = gx.hypot(gy);
            raw[mag_off + unit_bin(mag, GRAD_BINS)] += 1.0 / n as f64;
            if mag > 0.0 {
                let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                let bin = ((theta / std::f64::consts::PI * GRAD_BINS as f64).floor() as usize).min(GRAD_BINS - 1);
                raw[ori_off + bin] += mag;
                total_mag += mag;
            }
        }
    }
    if total_mag > 0.0 {
        for v in &mut raw[ori_off..] {
            *v /= total_mag;
        }
    }
    Embedding::normalized(raw)
}

/// Per-class mean embedding of training members.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeTable {
    prototypes: Vec<Embedding>,
}

impl PrototypeTable {
    pub fn new(prototypes: Vec<Embedding>) -> Self {
        Self { prototypes }
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototype(&self, class: PromptId) -> Result<&Embedding> {
        self.prototypes
            .get(class.0)
            .ok_or_else(|| param_err(format!("no prototype for class {}", class.0)))
    }

    /// Class whose prototype is most similar (lowest id on ties).
    pub fn nearest(&self, e: &Embedding) -> PromptId {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in self.prototypes.iter().enumerate() {
            let c = p.cosine(e);
            if c > best.1 {
                best = (i, c);
            }
        }
        PromptId(best.0)
    }
}

/// What a training member contributes: its image whitened outside its mask,
/// the same view the interior score takes of a generated glyph.
pub fn member_view(t: &Triplet) -> RgbImage {
    crop_paste_white(&t.image, &t.mask).expect("triplet image and mask share a frame")
}

/// Prototypes for every class; each class needs `min_members` members.
pub fn build_prototypes(embedder: &dyn Embedder, dataset: &[Triplet], min_members: usize) -> Result<PrototypeTable> {
    let mut sums = vec![vec![0.0f64; 0]; N_CLASSES];
    let mut counts = [0usize; N_CLASSES];
    for t in dataset {
        let e = embedder.embed(&member_view(t));
        let id = t.label.id();
        if sums[id].is_empty() {
            sums[id] = vec![0.0; e.dim()];
        }
        for (s, v) in sums[id].iter_mut().zip(&e.data) {
            *s += v;
        }
        counts[id] += 1;
    }
    let short: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c < min_members.max(1))
        .map(|(i, c)| format!("class {i} has {c}"))
        .collect();
    if !short.is_empty() {
        return Err(Error::Coverage(format!(
            "{} (need at least {} members each)",
            short.join(", "),
            min_members.max(1)
        )));
    }
    Ok(PrototypeTable::new(
        sums.into_iter()
            .zip(counts)
            .map(|(s, c)| Embedding::normalized(s.into_iter().map(|v| v / c as f64).collect()))
            .collect(),
    ))
}

fn check_frame(image: &RgbImage, mask: &CanvasMask) -> Result<()> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::Shape(format!(
            "image {}x{} and mask {}x{} differ",
            image.width(),
            image.height(),
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}

/// Similarity of the in-mask content (exterior whitened) to the class.
pub fn m_sim_int(
    embedder: &dyn Embedder,
    prototypes: &PrototypeTable,
    image: &RgbImage,
    mask: &CanvasMask,
    class: PromptId,
) -> Result<f64> {
    check_frame(image, mask)?;
    let p = prototypes.prototype(class)?;
    Ok(embedder.embed(&crop_paste_white(image, mask)?).cosine(p))
}

/// Similarity of the out-of-mask content (interior whitened) to the class;
/// lower means less leakage. A mask with no exterior scores as all white.
pub fn m_sim_ext(
    embedder: &dyn Embedder,
    prototypes: &PrototypeTable,
    image: &RgbImage,
    mask: &CanvasMask,
    class: PromptId,
) -> Result<f64> {
    check_frame(image, mask)?;
    let p = prototypes.prototype(class)?;
    Ok(embedder.embed(&crop_paste_white(image, &mask.complement())?).cosine(p))
}

/// Fraction of pixels where the alpha thresholded at 0.5 disagrees with
/// the mask.
pub fn boundary_flexibility(alpha: &AlphaMask, mask: &CanvasMask) -> Result<f64> {
    let t = alpha.threshold(0.5);
    if t.width() != mask.width() || t.height() != mask.height() {
        return Err(Error::Shape("alpha and mask differ in size".into()));
    }
    let n = t.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    let diff = t.data().iter().zip(mask.data()).filter(|(a, b)| a != b).count();
    Ok(diff as f64 / n as f64)
}

/// Mean pairwise cosine over all unordered pairs.
pub fn style_consistency(embedder: &dyn Embedder, images: &[&RgbImage]) -> Result<f64> {
    if images.len() < 2 {
        return Err(param_err("style consistency needs at least two images"));
    }
    let es: Vec<Embedding> = images.iter().map(|i| embedder.embed(i)).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..es.len() {
        for j in i + 1..es.len() {
            sum += es[i].cosine(&es[j]);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Scores of one benchmark case; `skipped` carries the reason a case was
/// not run, in which case the scores are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub index: usize,
    pub characters: String,
    pub category: String,
    pub language: String,
    pub m_sim_int: Option<f64>,
    pub m_sim_ext: Option<f64>,
    pub style_consistency: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub n_cases: usize,
    pub m_sim_int: Option<f64>,
    pub m_sim_ext: Option<f64>,
    pub style_consistency: Option<f64>,
}

impl MeanScores {
    pub fn of<'c>(cases: impl IntoIterator<Item = &'c CaseScore>) -> Self {
        let scored: Vec<&CaseScore> = cases.into_iter().filter(|c| c.skipped.is_none()).collect();
        let mean = |f: fn(&CaseScore) -> Option<f64>| {
            let v: Vec<f64> = scored.iter().filter_map(|c| f(c)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            n_cases: scored.len(),
            m_sim_int: mean(|c| c.m_sim_int),
            m_sim_ext: mean(|c| c.m_sim_ext),
            style_consistency: mean(|c| c.style_consistency),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub cases: Vec<CaseScore>,
    pub overall: MeanScores,
    pub by_category: BTreeMap<String, MeanScores>,
    pub by_language: BTreeMap<String, MeanScores>,
    pub warnings: Vec<String>,
}

impl ScoreReport {
    pub fn from_cases(cases: Vec<CaseScore>) -> Self {
        let mut cat: BTreeMap<String, Vec<&CaseScore>> = BTreeMap::new();
        let mut lang: BTreeMap<String, Vec<&CaseScore>> = BTreeMap::new();
        for c in &cases {
            cat.entry(c.category.clone()).or_default().push(c);
            lang.entry(c.language.clone()).or_default().push(c);
        }
        let group = |m: BTreeMap<String, Vec<&CaseScore>>| {
            m.into_iter()
                .map(|(k, v)| (k, MeanScores::of(v)))
                .collect::<BTreeMap<_, _>>()
        };
        let by_category = group(cat);
        let by_language = group(lang);
        let warnings = cases
            .iter()
            .filter_map(|c| c.skipped.as_ref().map(|r| format!("case {} skipped: {r}", c.index)))
            .collect();
        Self {
            overall: MeanScores::of(&cases),
            by_category,
            by_language,
            warnings,
            cases,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// One row per case; skipped cases leave the score columns empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let mut out = String::from("index,characters,category,language,m_sim_int,m_sim_ext,style_consistency,skipped\n");
        for c in &self.cases {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.index,
                c.characters,
                c.category,
                c.language,
                opt(c.m_sim_int),
                opt(c.m_sim_ext),
                opt(c.style_consistency),
                c.skipped.as_deref().unwrap_or("").replace([',', '\n'], ";"),
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn solid(rgb: [f32; 3]) -> RgbImage {
        RgbImage::solid(8, 8, rgb)
    }

    #[test]
    fn white_image_concentrates_in_extreme_bins() {
        let e = histograd_embed(&RgbImage::white(16, 16));
        assert!(!e.degenerate);
        let nz: Vec<usize> = (0..EMBED_DIM).filter(|&i| e.data[i] != 0.0).collect();
        assert_eq!(nz, vec![63, 64]);
        assert!((e.data[63] - e.data[64]).abs() < 1e-15);
        assert!((e.cosine(&e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_colour_image_matches_hand_binning() {
        // Left half black, right half (0.3, 0.6, 0.9), 4x4 frame.
        let img = RgbImage::from_fn(4, 4, |x, _| if x < 2 { [0.0; 3] } else { [0.3, 0.6, 0.9] });
        let mut raw = vec![0.0; EMBED_DIM];
        raw[0] = 0.5;
        raw[(4 + 2) * 4 + 3] = 0.5;
        // Gray is 0 or 0.6; gx is 0.6 at x = 1, 2 and 0 elsewhere, gy = 0.
        raw[64] = 0.5;
        raw[64 + 4] = 0.5;
        raw[72] = 1.0;
        let n = raw.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
        let want: Vec<f64> = raw.iter().map(|v| v / n).collect();
        let got = histograd_embed(&img);
        for (g, w) in got.data.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn empty_frame_is_degenerate() {
        let e = histograd_embed(&RgbImage::white(0, 0));
        assert!(e.degenerate);
        assert!(e.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn style_consistency_of_copies_is_one() {
        let a = solid([0.2, 0.5, 0.1]);
        assert_eq!(style_consistency(&HistoGrad, &[&a, &a, &a]).unwrap(), 1.0);
        let b = solid([0.9, 0.1, 0.1]);
        let two = style_consistency(&HistoGrad, &[&a, &b]).unwrap();
        assert!((two - histograd_embed(&a).cosine(&histograd_embed(&b))).abs() < 1e-15);
        assert!(style_consistency(&HistoGrad, &[&a]).is_err());
    }

    #[test]
    fn prototypes_need_coverage() {
        let data = generate_dataset(3, 12).unwrap();
        assert!(matches!(
            build_prototypes(&HistoGrad, &data, MIN_PROTOTYPE_MEMBERS),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn single_member_prototype_is_that_member() {
        let data = generate_dataset(4, 200).unwrap();
        let mut picked = Vec::new();
        for c in 0..N_CLASSES {
            picked.push(data.iter().find(|t| t.label.id() == c).unwrap().clone());
        }
        let table = build_prototypes(&HistoGrad, &picked, 1).unwrap();
        for t in &picked {
            let p = table.prototype(t.label.prompt()).unwrap();
            let e = histograd_embed(&member_view(t));
            for (a, b) in p.data.iter().zip(&e.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn whitening_makes_scores_blind_to_the_other_region() {
        let data = generate_dataset(5, 160).unwrap();
        let table = build_prototypes(&HistoGrad, &data, 1).unwrap();
        let t = &data[0];
        let mut inside = t.image.clone();
        let mut outside = t.image.clone();
        for y in 0..64 {
            for x in 0..64 {
                if t.mask.get(x, y) {
                    inside.set_pixel(x, y, [0.1, 0.9, 0.2]);
                } else {
                    outside.set_pixel(x, y, [0.7, 0.0, 0.4]);
                }
            }
        }
        let p = t.label.prompt();
        let int = m_sim_int(&HistoGrad, &table, &t.image, &t.mask, p).unwrap();
        let ext = m_sim_ext(&HistoGrad, &table, &t.image, &t.mask, p).unwrap();
        assert_eq!(int, m_sim_int(&HistoGrad, &table, &outside, &t.mask, p).unwrap());
        assert_eq!(ext, m_sim_ext(&HistoGrad, &table, &inside, &t.mask, p).unwrap());

        let full = CanvasMask::filled(64, 64, true);
        let white = histograd_embed(&RgbImage::white(64, 64)).cosine(table.prototype(p).unwrap());
        assert_eq!(m_sim_ext(&HistoGrad, &table, &t.image, &full, p).unwrap(), white);
    }

    #[test]
    fn report_aggregates_are_means_of_scored_cases() {
        let case = |i: usize, cat: &str, v: f64, skip: bool| CaseScore {
            index: i,
            characters: "ABCD".into(),
            category: cat.into(),
            language: "en".into(),
            m_sim_int: (!skip).then_some(v),
            m_sim_ext: (!skip).then_some(-v),
            style_consistency: (!skip).then_some(v / 2.0),
            skipped: skip.then(|| "no class".to_string()),
        };
        let r = ScoreReport::from_cases(vec![
            case(0, "Nature", 0.2, false),
            case(1, "Nature", 0.6, false),
            case(2, "Food", 0.5, true),
        ]);
        assert_eq!(r.overall.n_cases, 2);
        assert!((r.by_category["Nature"].m_sim_int.unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(r.by_category["Food"].n_cases, 0);
        assert_eq!(r.by_category["Food"].m_sim_int, None);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.to_csv().lines().count(), 4);
        assert_eq!(ScoreReport::from_cases(vec![]).overall.n_cases, 0);
    }
}
