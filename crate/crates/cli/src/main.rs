use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sadm_cli::commands::{self, EvalArgs, SampleFlags, TrainTarget};
use sadm_cli::{CliError, RunConfig, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "sadm", version, about = "Shape-adaptive diffusion for irregular canvases")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact root (overrides the config file and $SADM_HOME).
    #[arg(long, global = true)]
    home: Option<PathBuf>,
    /// Seed override for the command's main random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Denoising steps for the inference ladder.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long, global = true)]
    cfg_scale: Option<f64>,
    /// Output directory (overrides the config's output path).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sampling {
    /// Generate every glyph independently (no effect transfer).
    #[arg(long)]
    no_saet: bool,
    /// Use plain attention instead of the foreground/background split.
    #[arg(long)]
    ablate_saa: bool,
    /// Refinement noise strength in [0, 1].
    #[arg(long)]
    noise_strength: Option<f64>,
}

impl Sampling {
    fn flags(&self) -> SampleFlags {
        SampleFlags {
            no_saet: self.no_saet,
            ablate_saa: self.ablate_saa,
            noise_strength: self.noise_strength,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic training set.
    Gendata {
        /// Number of triplets (default: the configured dataset size).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the autoencoder or the denoiser.
    Train {
        #[arg(value_enum)]
        target: TrainTarget,
        /// Override the configured number of training steps.
        #[arg(long)]
        train_steps: Option<u64>,
        /// Continue from the checkpoint when one exists.
        #[arg(long)]
        resume: bool,
        /// Print a progress line every N steps (0 disables).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Generate a styled glyph set from mask PNGs.
    Generate {
        /// Texture class id.
        #[arg(long)]
        class: usize,
        #[command(flatten)]
        sampling: Sampling,
        /// Also write a contact sheet.
        #[arg(long)]
        grid: bool,
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
    /// Transfer the style of a reference glyph image to target masks.
    Transfer {
        /// Texture class id.
        #[arg(long)]
        class: usize,
        /// Styled reference glyph (PNG).
        #[arg(long)]
        reference: PathBuf,
        /// Shape mask of the reference glyph.
        #[arg(long)]
        reference_mask: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        /// Also write a contact sheet.
        #[arg(long)]
        grid: bool,
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
    /// Score a benchmark suite.
    Eval {
        /// Suite JSON (default: the shipped suite).
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Mask root holding `<font_type>/<codepoint-hex>.png` (default: shipped masks).
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Record cases with missing masks as skipped instead of failing.
        #[arg(long)]
        skip_missing_masks: bool,
        /// Write every generated glyph next to the report.
        #[arg(long)]
        save_images: bool,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Refine one coarse sample per mask at several noise strengths.
    SweepStrength {
        /// Texture class id.
        #[arg(long)]
        class: usize,
        /// Comma-separated strengths.
        #[arg(long, value_delimiter = ',', default_values_t = commands::DEFAULT_SWEEP)]
        strengths: Vec<f64>,
        /// Use plain attention instead of the foreground/background split.
        #[arg(long)]
        ablate_saa: bool,
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(h) = &common.home {
        cfg.paths.home = Some(h.clone());
    }
    if let Some(s) = common.steps {
        cfg.steps = s;
    }
    if let Some(c) = common.cfg_scale {
        cfg.cfg_scale = c;
    }
    if let Some(o) = &common.out {
        cfg.paths.output = Some(o.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Gendata { size } => {
            if let Some(s) = size {
                cfg.dataset_size = s;
            }
            if let Some(o) = &cli.common.out {
                cfg.paths.dataset = Some(o.clone());
            }
            if let Some(s) = cli.common.seed {
                cfg.seeds.data = s;
            }
            cfg.validate()?;
            let dir = commands::gendata(&cfg, cli.common.jobs)?;
            println!("wrote {} triplets to {}", cfg.dataset_size, dir.display());
        }
        Command::Train {
            target,
            train_steps,
            resume,
            log_every,
        } => {
            if let Some(n) = train_steps {
                match target {
                    TrainTarget::Ae => cfg.training.ae = n,
                    TrainTarget::Denoiser => cfg.training.denoiser = n,
                }
            }
            if let Some(s) = cli.common.seed {
                match target {
                    TrainTarget::Ae => cfg.seeds.ae = s,
                    TrainTarget::Denoiser => cfg.seeds.denoiser = s,
                }
            }
            cfg.validate()?;
            let start = std::time::Instant::now();
            let path = commands::train(&cfg, target, resume, &mut |step, loss| {
                if log_every > 0 && (step + 1) % log_every == 0 {
                    eprintln!("step {:>6} loss {loss:.5} ({:.0}s)", step + 1, start.elapsed().as_secs_f64());
                }
            })?;
            println!("checkpoint {}", path.display());
        }
        Command::Generate {
            class,
            sampling,
            grid,
            masks,
        } => {
            sample_seed(&mut cfg, cli.common.seed);
            let flags = sampling.flags();
            check_strength(&mut cfg, &flags)?;
            for p in commands::generate(&cfg, &masks, class, &flags, grid)? {
                println!("{}", p.display());
            }
        }
        Command::Transfer {
            class,
            reference,
            reference_mask,
            sampling,
            grid,
            masks,
        } => {
            sample_seed(&mut cfg, cli.common.seed);
            let flags = sampling.flags();
            check_strength(&mut cfg, &flags)?;
            let written = commands::transfer(
                &cfg,
                &reference,
                &reference_mask,
                &masks,
                class,
                &flags,
                grid,
                cli.common.jobs,
            )?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            suite,
            masks,
            skip_missing_masks,
            save_images,
            sampling,
        } => {
            sample_seed(&mut cfg, cli.common.seed);
            let flags = sampling.flags();
            check_strength(&mut cfg, &flags)?;
            let args = EvalArgs {
                suite: suite.as_deref(),
                masks: masks.as_deref(),
                skip_missing_masks,
                save_images,
            };
            let report = commands::eval(&cfg, &args, &flags, cli.common.jobs)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} cases scored, report in {}",
                report.overall.n_cases,
                cfg.output_dir().display()
            );
        }
        Command::SweepStrength {
            class,
            strengths,
            ablate_saa,
            masks,
        } => {
            sample_seed(&mut cfg, cli.common.seed);
            cfg.validate()?;
            let flags = SampleFlags {
                ablate_saa,
                ..SampleFlags::default()
            };
            let rows = commands::sweep_strength(&cfg, &masks, class, &strengths, &flags, cli.common.jobs)?;
            for r in rows {
                println!("{} {:.2} {:.4}", r.mask, r.strength, r.boundary_flexibility);
            }
        }
    }
    Ok(())
}

fn sample_seed(cfg: &mut RunConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.seeds.sample = s;
    }
}

fn check_strength(cfg: &mut RunConfig, flags: &SampleFlags) -> Result<(), CliError> {
    if let Some(s) = flags.noise_strength {
        cfg.strength_srm = s;
    }
    cfg.validate()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
