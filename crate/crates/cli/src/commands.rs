use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sadm_core::autoencoder::{AutoencoderConfig, AutoencoderModel};
use sadm_core::autograd::Routing;
use sadm_core::bench::{load_suite, run_case, shipped_mask_dir, shipped_suite, with_case_context, BenchOptions};
use sadm_core::canvas::{
    composite_over_white, hstack, load_mask_png, load_rgb_png, save_rgb_png, save_rgba_png, CanvasMask,
};
use sadm_core::checkpoint;
use sadm_core::denoiser::{DenoiserConfig, DenoiserModel, PromptId};
use sadm_core::metrics::{
    boundary_flexibility, build_prototypes, HistoGrad, PrototypeTable, ScoreReport, MIN_PROTOTYPE_MEMBERS,
};
use sadm_core::pipeline::{font_effect_generate, EffectResult, GenerateOptions, Sampler, TransferContext};
use sadm_core::schedule::NoiseSchedule;
use sadm_core::synthdata::{self, TextureClass, Triplet};
use sadm_core::training::{self, RunPaths};
use serde::{Deserialize, Serialize};

use crate::config::{log_path, RunConfig};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainTarget {
    Ae,
    Denoiser,
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Generates the synthetic dataset in parallel; item order and content do
/// not depend on `jobs`.
pub fn generate_triplets(seed: u64, size: usize, jobs: usize) -> Result<Vec<Triplet>, CliError> {
    thread_pool(jobs)?.install(|| {
        (0..size)
            .into_par_iter()
            .map(|i| synthdata::make_triplet(synthdata::item_seed(seed, i)))
            .collect::<sadm_core::Result<Vec<_>>>()
            .map_err(CliError::core("generating dataset"))
    })
}

pub fn gendata(cfg: &RunConfig, jobs: usize) -> Result<PathBuf, CliError> {
    let dir = cfg.dataset_dir();
    let data = generate_triplets(cfg.seeds.data, cfg.dataset_size, jobs)?;
    synthdata::write_dataset(&dir, &data)
        .map_err(CliError::core(format!("writing dataset to {}", dir.display())))?;
    Ok(dir)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<Triplet>, CliError> {
    let dir = cfg.dataset_dir();
    synthdata::read_dataset(&dir).map_err(CliError::core(format!("reading dataset {}", dir.display())))
}

pub fn load_autoencoder(cfg: &RunConfig) -> Result<AutoencoderModel<f32>, CliError> {
    let path = cfg.ae_checkpoint();
    let ctx = format!("loading autoencoder {}", path.display());
    let t = checkpoint::load(&path).map_err(CliError::core(ctx.clone()))?;
    AutoencoderModel::from_tensors(&t).map_err(CliError::core(ctx))
}

pub fn load_denoiser(cfg: &RunConfig) -> Result<DenoiserModel<f32>, CliError> {
    let path = cfg.denoiser_checkpoint();
    let ctx = format!("loading denoiser {}", path.display());
    let t = checkpoint::load(&path).map_err(CliError::core(ctx.clone()))?;
    DenoiserModel::from_tensors(&t).map_err(CliError::core(ctx))
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule, CliError> {
    NoiseSchedule::new(sadm_core::schedule::DEFAULT_TRAIN_STEPS, cfg.steps)
        .map_err(CliError::core("building noise schedule"))
}

fn resume_state(path: &std::path::Path, resume: bool) -> Result<Option<checkpoint::TensorList>, CliError> {
    if resume && path.exists() {
        checkpoint::load(path)
            .map(Some)
            .map_err(CliError::core(format!("resuming from {}", path.display())))
    } else {
        Ok(None)
    }
}

/// Trains the chosen model; returns the checkpoint path.
pub fn train(
    cfg: &RunConfig,
    target: TrainTarget,
    resume: bool,
    progress: &mut dyn FnMut(u64, f64),
) -> Result<PathBuf, CliError> {
    let data = load_dataset(cfg)?;
    match target {
        TrainTarget::Ae => {
            let ckpt = cfg.ae_checkpoint();
            let log = log_path(&ckpt);
            let state = resume_state(&ckpt, resume)?;
            let init = AutoencoderModel::init(AutoencoderConfig::default(), cfg.seeds.ae)
                .map_err(CliError::core("initialising autoencoder"))?;
            training::train_autoencoder(
                init,
                state.as_ref(),
                &data,
                &cfg.ae_train_options(),
                &RunPaths { checkpoint: &ckpt, log: &log },
                progress,
            )
            .map_err(CliError::core("training autoencoder"))?;
            Ok(ckpt)
        }
        TrainTarget::Denoiser => {
            let ae = load_autoencoder(cfg)?;
            let ckpt = cfg.denoiser_checkpoint();
            let log = log_path(&ckpt);
            let state = resume_state(&ckpt, resume)?;
            let (samples, norm) =
                training::prepare_latents(&ae, &data, 64).map_err(CliError::core("encoding dataset"))?;
            let dcfg = DenoiserConfig {
                latent_size: cfg.latent_size,
                ..DenoiserConfig::default()
            };
            let mut init = DenoiserModel::init(dcfg, cfg.seeds.denoiser)
                .map_err(CliError::core("initialising denoiser"))?;
            init.latent_norm = norm;
            training::train_denoiser(
                init,
                state.as_ref(),
                &samples,
                &schedule(cfg)?,
                &cfg.denoiser_train_options(),
                &RunPaths { checkpoint: &ckpt, log: &log },
                progress,
            )
            .map_err(CliError::core("training denoiser"))?;
            Ok(ckpt)
        }
    }
}

/// Model pair loaded once and shared by sampling commands.
pub struct Models {
    pub denoiser: DenoiserModel<f32>,
    pub ae: AutoencoderModel<f32>,
}

impl Models {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        Ok(Self {
            denoiser: load_denoiser(cfg)?,
            ae: load_autoencoder(cfg)?,
        })
    }

    pub fn sampler(&self, cfg: &RunConfig, ablate_saa: bool) -> Result<Sampler<'_, f32>, CliError> {
        let mut s = Sampler::new(&self.denoiser, &self.ae, schedule(cfg)?);
        s.cfg_scale = cfg.cfg_scale;
        if ablate_saa {
            s.routing = Routing::Plain;
        }
        Ok(s)
    }
}

/// Sampling switches shared by `generate`, `transfer` and `eval`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleFlags {
    pub no_saet: bool,
    pub ablate_saa: bool,
    /// Overrides the refinement strength.
    pub noise_strength: Option<f64>,
}

impl SampleFlags {
    pub fn generate_options(&self, cfg: &RunConfig) -> GenerateOptions {
        GenerateOptions {
            strength_srm: self.noise_strength.unwrap_or(cfg.strength_srm),
            strength_saet_sgm: cfg.strength_saet_sgm,
            strength_saet_srm: cfg.strength_saet_srm,
            saet: !self.no_saet,
        }
    }
}

pub fn load_masks(paths: &[PathBuf]) -> Result<Vec<CanvasMask>, CliError> {
    paths
        .iter()
        .map(|p| {
            let m = load_mask_png(p).map_err(CliError::core(format!("mask {}", p.display())))?;
            m.validate_condition()
                .map_err(CliError::core(format!("mask {}", p.display())))?;
            Ok(m)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub mask: String,
    pub index: usize,
    pub reference_index: usize,
    pub seed: u64,
    pub prompt: usize,
    pub cfg_scale: f64,
    pub steps: usize,
    pub strength_srm: f64,
    pub strength_saet_sgm: f64,
    pub strength_saet_srm: f64,
    pub saet: bool,
    pub shape_adaptive_attention: bool,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::core(format!("writing {}", path.display()))(e.into()))
}

fn io_ctx(path: &Path) -> impl FnOnce(sadm_core::Error) -> CliError {
    CliError::core(format!("writing {}", path.display()))
}

/// Writes per-glyph RGBA PNGs plus sidecars, and optionally a contact sheet.
#[allow(clippy::too_many_arguments)]
pub fn write_results(
    out: &Path,
    names: &[String],
    results: &[EffectResult],
    reference: usize,
    cfg: &RunConfig,
    flags: &SampleFlags,
    opts: &GenerateOptions,
    grid: bool,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_ctx(out)(e.into()))?;
    let mut written = Vec::new();
    for (i, (r, name)) in results.iter().zip(names).enumerate() {
        let stem = format!("{i:02}_{name}");
        let png = out.join(format!("{stem}.png"));
        save_rgba_png(&r.image, &r.alpha, &png).map_err(io_ctx(&png))?;
        let side = Sidecar {
            mask: name.clone(),
            index: i,
            reference_index: reference,
            seed: r.seed,
            prompt: r.prompt.0,
            cfg_scale: cfg.cfg_scale,
            steps: cfg.steps,
            strength_srm: opts.strength_srm,
            strength_saet_sgm: opts.strength_saet_sgm,
            strength_saet_srm: opts.strength_saet_srm,
            saet: opts.saet,
            shape_adaptive_attention: !flags.ablate_saa,
        };
        write_json(&side, &out.join(format!("{stem}.json")))?;
        written.push(png);
    }
    if grid && !results.is_empty() {
        let comps = results
            .iter()
            .map(|r| composite_over_white(&r.image, &r.alpha))
            .collect::<sadm_core::Result<Vec<_>>>()
            .map_err(CliError::core("compositing grid"))?;
        let sheet = hstack(&comps.iter().collect::<Vec<_>>()).map_err(CliError::core("building grid"))?;
        let path = out.join("grid.png");
        save_rgb_png(&sheet, &path).map_err(io_ctx(&path))?;
        written.push(path);
    }
    Ok(written)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "mask".into(), |s| s.to_string_lossy().into_owned())
}

pub fn check_class(class: usize) -> Result<PromptId, CliError> {
    TextureClass::from_id(class)
        .map(TextureClass::prompt)
        .map_err(CliError::core("class id"))
}

/// Full two-stage generation over a set of masks.
pub fn generate(
    cfg: &RunConfig,
    mask_files: &[PathBuf],
    class: usize,
    flags: &SampleFlags,
    grid: bool,
) -> Result<Vec<PathBuf>, CliError> {
    let prompt = check_class(class)?;
    let masks = load_masks(mask_files)?;
    let models = Models::load(cfg)?;
    let sampler = models.sampler(cfg, flags.ablate_saa)?;
    let opts = flags.generate_options(cfg);
    let (results, reference) = font_effect_generate(&sampler, &masks, prompt, cfg.seeds.sample, &opts)
        .map_err(CliError::core("generating"))?;
    let names: Vec<String> = mask_files.iter().map(|p| file_stem(p)).collect();
    write_results(&cfg.output_dir(), &names, &results, reference, cfg, flags, &opts, grid)
}

/// Stage-two transfer from a given reference image to target masks.
#[allow(clippy::too_many_arguments)]
pub fn transfer(
    cfg: &RunConfig,
    ref_image: &Path,
    ref_mask: &Path,
    mask_files: &[PathBuf],
    class: usize,
    flags: &SampleFlags,
    grid: bool,
    jobs: usize,
) -> Result<Vec<PathBuf>, CliError> {
    let prompt = check_class(class)?;
    let image = load_rgb_png(ref_image).map_err(CliError::core(format!("reference {}", ref_image.display())))?;
    let rmask = load_masks(&[ref_mask.to_path_buf()])?.remove(0);
    let masks = load_masks(mask_files)?;
    let models = Models::load(cfg)?;
    let sampler = models.sampler(cfg, flags.ablate_saa)?;
    let opts = flags.generate_options(cfg);
    let ctx = TransferContext {
        strength_sgm: opts.strength_saet_sgm,
        strength_srm: opts.strength_saet_srm,
        propagate: !flags.no_saet,
        ..TransferContext::new(rmask, image)
    };
    let seed = cfg.seeds.sample;
    let results = thread_pool(jobs)?.install(|| {
        masks
            .par_iter()
            .map(|m| {
                let coarse = sampler.saet_sample(&ctx, m, prompt, seed)?;
                sampler.saet_refine(&ctx, &coarse, m, prompt, seed)
            })
            .collect::<sadm_core::Result<Vec<_>>>()
    });
    let results = results.map_err(CliError::core("transferring"))?;
    let names: Vec<String> = mask_files.iter().map(|p| file_stem(p)).collect();
    write_results(&cfg.output_dir(), &names, &results, usize::MAX, cfg, flags, &opts, grid)
}

/// Items drawn from the training distribution to build class prototypes.
pub const PROTOTYPE_SET_SIZE: usize = 2048;

pub fn prototypes(cfg: &RunConfig, jobs: usize) -> Result<PrototypeTable, CliError> {
    let data = generate_triplets(cfg.seeds.data, cfg.dataset_size.min(PROTOTYPE_SET_SIZE), jobs)?;
    build_prototypes(&HistoGrad, &data, MIN_PROTOTYPE_MEMBERS).map_err(CliError::core("building prototypes"))
}

pub struct EvalArgs<'a> {
    pub suite: Option<&'a Path>,
    pub masks: Option<&'a Path>,
    pub skip_missing_masks: bool,
    pub save_images: bool,
}

/// Scores a benchmark suite; writes `report.json` and `report.csv`.
pub fn eval(cfg: &RunConfig, args: &EvalArgs<'_>, flags: &SampleFlags, jobs: usize) -> Result<ScoreReport, CliError> {
    let suite = match args.suite {
        Some(p) => load_suite(p).map_err(CliError::core(format!("suite {}", p.display())))?,
        None => shipped_suite(),
    };
    let mask_dir = args.masks.map_or_else(shipped_mask_dir, Path::to_path_buf);
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out).map_err(|e| io_ctx(&out)(e.into()))?;
    let report = if suite.cases.is_empty() {
        ScoreReport::from_cases(Vec::new())
    } else {
        let models = Models::load(cfg)?;
        let sampler = models.sampler(cfg, flags.ablate_saa)?;
        let table = prototypes(cfg, jobs)?;
        let opts = BenchOptions {
            generate: flags.generate_options(cfg),
            skip_missing_masks: args.skip_missing_masks,
        };
        let runs = thread_pool(jobs)?.install(|| {
            suite
                .cases
                .par_iter()
                .enumerate()
                .map(|(i, case)| {
                    run_case(&sampler, &HistoGrad, &table, i, case, &mask_dir, cfg.seeds.sample, &opts)
                        .map_err(|e| with_case_context(i, case, e))
                })
                .collect::<sadm_core::Result<Vec<_>>>()
        });
        let runs = runs.map_err(CliError::core("running benchmark"))?;
        if args.save_images {
            for (i, (score, results)) in runs.iter().enumerate() {
                let names: Vec<String> = score.characters.chars().map(|c| format!("{:04x}", c as u32)).collect();
                write_results(
                    &out.join(format!("case_{i:03}")),
                    &names,
                    results,
                    sadm_core::pipeline::select_reference(
                        &results.iter().map(|r| r.source_mask.clone()).collect::<Vec<_>>(),
                    )
                    .unwrap_or(0),
                    cfg,
                    flags,
                    &opts.generate,
                    true,
                )?;
            }
        }
        ScoreReport::from_cases(runs.into_iter().map(|(s, _)| s).collect())
    };
    let json = out.join("report.json");
    report.write_json(&json).map_err(io_ctx(&json))?;
    let csv = out.join("report.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| io_ctx(&csv)(e.into()))?;
    Ok(report)
}

pub const DEFAULT_SWEEP: [f64; 6] = [0.0, 0.4, 0.6, 0.8, 0.85, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask: String,
    pub strength: f64,
    pub boundary_flexibility: f64,
}

/// Refines one coarse sample per mask at each strength; writes the
/// refined glyphs and `sweep.csv`.
pub fn sweep_strength(
    cfg: &RunConfig,
    mask_files: &[PathBuf],
    class: usize,
    strengths: &[f64],
    flags: &SampleFlags,
    jobs: usize,
) -> Result<Vec<SweepRow>, CliError> {
    let prompt = check_class(class)?;
    for &s in strengths {
        if !(0.0..=1.0).contains(&s) {
            return Err(CliError::Config(format!("strength {s} outside [0, 1]")));
        }
    }
    let masks = load_masks(mask_files)?;
    let models = Models::load(cfg)?;
    let sampler = models.sampler(cfg, flags.ablate_saa)?;
    let seed = cfg.seeds.sample;
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out).map_err(|e| io_ctx(&out)(e.into()))?;
    let per_mask = thread_pool(jobs)?.install(|| {
        masks
            .par_iter()
            .map(|m| {
                let coarse = sampler.sgm_sample(m, prompt, seed)?;
                strengths
                    .iter()
                    .map(|&s| sampler.srm_refine(&coarse, m, prompt, s, seed))
                    .collect::<sadm_core::Result<Vec<_>>>()
            })
            .collect::<sadm_core::Result<Vec<_>>>()
    });
    let per_mask = per_mask.map_err(CliError::core("sweeping strength"))?;
    let mut rows = Vec::new();
    let mut csv = String::from("mask,strength,boundary_flexibility\n");
    for (path, results) in mask_files.iter().zip(&per_mask) {
        let name = file_stem(path);
        for (&s, r) in strengths.iter().zip(results) {
            let bf = boundary_flexibility(&r.alpha, &r.source_mask).map_err(CliError::core("scoring sweep"))?;
            let png = out.join(format!("{name}_s{s:.2}.png"));
            save_rgba_png(&r.image, &r.alpha, &png).map_err(io_ctx(&png))?;
            csv.push_str(&format!("{name},{s},{bf:?}\n"));
            rows.push(SweepRow {
                mask: name.clone(),
                strength: s,
                boundary_flexibility: bf,
            });
        }
    }
    let path = out.join("sweep.csv");
    std::fs::write(&path, csv).map_err(|e| io_ctx(&path)(e.into()))?;
    Ok(rows)
}
