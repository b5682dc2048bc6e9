//! The four-glyph font effect benchmark: case records, suite validation,
//! mask lookup and scoring.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::canvas::{load_mask_png, CanvasMask};
use crate::denoiser::PromptId;
use crate::error::{Error, Result};
use crate::metrics::{m_sim_ext, m_sim_int, style_consistency, CaseScore, Embedder, PrototypeTable, ScoreReport};
use crate::pipeline::{font_effect_generate, EffectResult, GenerateOptions, Sampler};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::synthdata::N_CLASSES;

pub const GLYPHS_PER_CASE: usize = 4;

/// Full-model prompt wrapper; the desk models are driven by `desk_class`.
pub const PROMPT_TEMPLATE: &str = "a shape fully made of {prompt}, artistic, trending on artstation.";

/// The shipped 145-case suite.
pub const SHIPPED_SUITE_JSON: &str = include_str!("../assets/generativefont.json");

/// Glyph masks rendered for the shipped suite's Latin fonts.
pub fn shipped_mask_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("masks")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Nature,
    Material,
    Food,
    Animal,
    Landscape,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Nature => "Nature",
            Category::Material => "Material",
            Category::Food => "Food",
            Category::Animal => "Animal",
            Category::Landscape => "Landscape",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
    Ja,
    Ko,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Zh => "zh",
            Language::Ja => "ja",
            Language::Ko => "ko",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkCase {
    pub characters: String,
    pub font_type: String,
    pub category: Category,
    pub prompt: String,
    pub language: Language,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desk_class: Option<usize>,
}

impl BenchmarkCase {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let chars: Vec<char> = self.characters.chars().collect();
        if chars.len() != GLYPHS_PER_CASE {
            v.push(format!(
                "characters `{}` has {} code points, expected {GLYPHS_PER_CASE}",
                self.characters,
                chars.len()
            ));
        }
        let mut seen = chars.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != chars.len() {
            v.push(format!("characters `{}` repeat a code point", self.characters));
        }
        if self.font_type.is_empty()
            || self.font_type.contains(['/', '\\'])
            || self.font_type == "."
            || self.font_type == ".."
        {
            v.push(format!("font_type `{}` is not a plain identifier", self.font_type));
        }
        if self.prompt.trim().is_empty() {
            v.push("prompt is empty".into());
        }
        if let Some(c) = self.desk_class {
            if c >= N_CLASSES {
                v.push(format!("desk_class {c} outside [0, {N_CLASSES})"));
            }
        }
        v
    }

    pub fn full_prompt(&self) -> String {
        PROMPT_TEMPLATE.replace("{prompt}", &self.prompt)
    }

    /// Mask file of one character: `<font_type>/<codepoint-hex>.png`.
    pub fn mask_path(&self, mask_dir: &Path, ch: char) -> PathBuf {
        mask_dir.join(&self.font_type).join(format!("{:04x}.png", ch as u32))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BenchmarkSuite {
    pub cases: Vec<BenchmarkCase>,
}

impl BenchmarkSuite {
    pub fn language_counts(&self) -> BTreeMap<Language, usize> {
        let mut m = BTreeMap::new();
        for c in &self.cases {
            *m.entry(c.language).or_insert(0) += 1;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        for (index, c) in self.cases.iter().enumerate() {
            let v = c.violations();
            if !v.is_empty() {
                return Err(Error::SuiteInvariant {
                    index,
                    violations: v.join("; "),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.cases).expect("cases serialise");
        s.push('\n');
        s
    }
}

pub fn parse_suite(text: &str) -> Result<BenchmarkSuite> {
    let cases: Vec<BenchmarkCase> = serde_json::from_str(text).map_err(|e| Error::SuiteParse(e.to_string()))?;
    let suite = BenchmarkSuite { cases };
    suite.validate()?;
    Ok(suite)
}

pub fn load_suite(path: &Path) -> Result<BenchmarkSuite> {
    let text = std::fs::read_to_string(path)?;
    parse_suite(&text).map_err(|e| match e {
        Error::SuiteParse(m) => Error::SuiteParse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_suite(suite: &BenchmarkSuite, path: &Path) -> Result<()> {
    suite.validate()?;
    std::fs::write(path, suite.to_json())?;
    Ok(())
}

pub fn shipped_suite() -> BenchmarkSuite {
    parse_suite(SHIPPED_SUITE_JSON).expect("shipped suite is valid")
}

/// Loads the masks of a case in character order.
pub fn resolve_masks(case: &BenchmarkCase, mask_dir: &Path) -> Result<Vec<CanvasMask>> {
    case.characters
        .chars()
        .map(|ch| {
            let path = case.mask_path(mask_dir, ch);
            if !path.is_file() {
                return Err(Error::MaskResolution {
                    codepoint: ch,
                    codepoint_hex: format!("{:04X}", ch as u32),
                    path,
                });
            }
            load_mask_png(&path)
        })
        .collect()
}

/// Seed of case `index` under a suite seed.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, &[stream::BENCH, index as u64])
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct BenchOptions {
    pub generate: GenerateOptions,
    /// Record cases whose masks cannot be resolved as skipped instead of
    /// failing the run.
    pub skip_missing_masks: bool,
}


fn blank_score(index: usize, case: &BenchmarkCase) -> CaseScore {
    CaseScore {
        index,
        characters: case.characters.clone(),
        category: case.category.name().to_string(),
        language: case.language.code().to_string(),
        m_sim_int: None,
        m_sim_ext: None,
        style_consistency: None,
        skipped: None,
    }
}

/// Scores a set of generated glyphs against their masks and class.
pub fn score_results(
    embedder: &dyn Embedder,
    prototypes: &PrototypeTable,
    results: &[EffectResult],
    class: PromptId,
) -> Result<(f64, f64, f64)> {
    let n = results.len() as f64;
    let mut int = 0.0;
    let mut ext = 0.0;
    for r in results {
        int += m_sim_int(embedder, prototypes, &r.image, &r.source_mask, class)?;
        ext += m_sim_ext(embedder, prototypes, &r.image, &r.source_mask, class)?;
    }
    let images: Vec<_> = results.iter().map(|r| &r.image).collect();
    Ok((int / n, ext / n, style_consistency(embedder, &images)?))
}

/// Runs one case. Returns the score and, when the case ran, its results.
#[allow(clippy::too_many_arguments)]
pub fn run_case<T: Scalar>(
    sampler: &Sampler<'_, T>,
    embedder: &dyn Embedder,
    prototypes: &PrototypeTable,
    index: usize,
    case: &BenchmarkCase,
    mask_dir: &Path,
    seed: u64,
    opts: &BenchOptions,
) -> Result<(CaseScore, Vec<EffectResult>)> {
    let mut score = blank_score(index, case);
    let Some(class) = case.desk_class else {
        score.skipped = Some("no desk_class for this prompt".into());
        return Ok((score, Vec::new()));
    };
    let masks = match resolve_masks(case, mask_dir) {
        Ok(m) => m,
        Err(e @ Error::MaskResolution { .. }) if opts.skip_missing_masks => {
            score.skipped = Some(e.to_string());
            return Ok((score, Vec::new()));
        }
        Err(e) => return Err(e),
    };
    let class = PromptId(class);
    let (results, _) = font_effect_generate(sampler, &masks, class, case_seed(seed, index), &opts.generate)?;
    let (int, ext, sc) = score_results(embedder, prototypes, &results, class)?;
    score.m_sim_int = Some(int);
    score.m_sim_ext = Some(ext);
    score.style_consistency = Some(sc);
    Ok((score, results))
}

/// Error wrapper naming the case a failure came from.
pub fn with_case_context(index: usize, case: &BenchmarkCase, e: Error) -> Error {
    Error::SuiteInvariant {
        index,
        violations: format!("case `{}` ({}) failed: {e}", case.characters, case.font_type),
    }
}

/// Runs every case in order and aggregates the scores.
pub fn run_benchmark<T: Scalar>(
    sampler: &Sampler<'_, T>,
    embedder: &dyn Embedder,
    prototypes: &PrototypeTable,
    suite: &BenchmarkSuite,
    mask_dir: &Path,
    seed: u64,
    opts: &BenchOptions,
) -> Result<ScoreReport> {
    let mut scores = Vec::with_capacity(suite.cases.len());
    for (i, case) in suite.cases.iter().enumerate() {
        let (s, _) = run_case(sampler, embedder, prototypes, i, case, mask_dir, seed, opts)
            .map_err(|e| with_case_context(i, case, e))?;
        scores.push(s);
    }
    Ok(ScoreReport::from_cases(scores))
}
