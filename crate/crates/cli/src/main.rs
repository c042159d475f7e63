//! `lodseg`: command-line front end.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error.

mod cache;
mod config;
mod jobs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lodseg_core::manifest::Manifest;
use lodseg_core::motion::MotionSpec;
use lodseg_core::phantom::PhantomSpec;
use lodseg_core::trainer::DataSource;
use lodseg_core::volume_io::DEFAULT_SHAPE;
use lodseg_core::{Error, Interp, Result};

use crate::config::RunConfig;
use crate::jobs::Job;

#[derive(Parser, Debug)]
#[command(name = "lodseg", version, about = "Level-of-detail brain MRI segmentation")]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Global seed for commands that draw random numbers.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum InterpArg {
    Linear,
    Nearest,
}

impl From<InterpArg> for Interp {
    fn from(a: InterpArg) -> Self {
        match a {
            InterpArg::Linear => Interp::Linear,
            InterpArg::Nearest => Interp::Nearest,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resample a volume (or label map) to an isotropic RAS+ grid.
    Conform(ConformArgs),
    /// Train one stage or a whole pipeline from the `[train]` config block.
    Train {
        /// Skip pipeline stages whose checkpoints are already complete.
        #[arg(long)]
        resume: bool,
        /// Override `epochs` in every stage.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment a volume, or every volume in a directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
        /// Class scheme preset; defaults to the one matching the checkpoint.
        #[arg(long)]
        classes: Option<String>,
        /// Conform and normalize inputs to the network grid first (cached in $LODSEG_CACHE).
        #[arg(long)]
        conform: bool,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        classes: Option<String>,
        /// CSV with volume_id, site, age_months.
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        no_plots: bool,
    },
    /// Rank volumes by disagreement between methods.
    Discordant {
        /// `report.json` files from `evaluate`.
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(short, long, default_value_t = lodseg_core::evaluator::DEFAULT_DISCORDANT_K)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice under simulated motion over a range of severities.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with `images/` and `labels/`.
        #[arg(long, conflicts_with = "phantoms")]
        data: Option<PathBuf>,
        /// Use this many synthetic phantoms instead of `--data`.
        #[arg(long)]
        phantoms: Option<usize>,
        #[arg(long)]
        classes: Option<String>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented samples and the sampled plans.
    AugmentPreview {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "raw7")]
        classes: String,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a volume with simulated rigid motion.
    MotionSim {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        events: Option<usize>,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Export a class surface as an ASCII PLY mesh.
    Mesh {
        #[arg(long = "in")]
        labels: PathBuf,
        #[arg(long)]
        classes: Option<String>,
        /// A class name, `inner_gm` or `outer_gm`.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        smoothing_iters: Option<usize>,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Write synthetic phantoms as `images/` and `labels/`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value = "raw7")]
        classes: String,
    },
    /// Re-run the job recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConformArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long)]
    mm: Option<f64>,
    /// Cubic grid extent.
    #[arg(long)]
    shape: Option<usize>,
    #[arg(long, value_enum)]
    interp: Option<InterpArg>,
    /// The input is a label map (nearest-neighbour resampling).
    #[arg(long)]
    labels: bool,
    /// Class scheme for `--labels`.
    #[arg(long, default_value = "raw7")]
    classes: String,
    /// Also normalize intensities to [0, 1].
    #[arg(long)]
    normalize: bool,
}

/// Turns flags plus config into a fully resolved job.
fn resolve(cmd: Command, cfg: &RunConfig, explicit_seed: Option<u64>) -> Result<Job> {
    let seed = explicit_seed.unwrap_or(0);
    Ok(match cmd {
        Command::Conform(a) => {
            let c = cfg.conform.clone().unwrap_or_default();
            Job::Conform {
                input: a.input,
                output: a.output,
                mm: a.mm.or(c.mm).unwrap_or(lodseg_core::volume_io::DEFAULT_MM),
                shape: a.shape.or(c.shape).unwrap_or(DEFAULT_SHAPE[0]),
                interp: a.interp.map(Interp::from).or(c.interp).unwrap_or(Interp::Linear),
                labels: a.labels.then_some(a.classes),
                normalize: a.normalize,
            }
        }
        Command::Train { resume, epochs } => {
            let Some(mut train) = cfg.train.clone() else {
                return Err(Error::Config("train needs --config with a [train] block".into()));
            };
            for s in &mut train.stages {
                if let Some(e) = epochs {
                    s.epochs = e;
                }
                if let Some(seed) = explicit_seed {
                    s.seed = seed;
                }
            }
            Job::Train { train, resume }
        }
        Command::Infer { checkpoint, input, output, classes, conform } => Job::Infer { checkpoint, input, output, classes, conform },
        Command::Evaluate { pred, gt, out, method, classes, metadata, no_plots } => {
            let e = cfg.evaluate.clone().unwrap_or_default();
            Job::Evaluate {
                pred,
                gt,
                out,
                method: method.or(e.method).unwrap_or_else(|| "lodseg".into()),
                classes: classes.or(e.classes).unwrap_or_else(|| "raw7".into()),
                metadata: metadata.or(e.metadata),
                plots: !no_plots && e.plots.unwrap_or(true),
            }
        }
        Command::Discordant { reports, k, out } => Job::Discordant { reports, k, out },
        Command::Robustness { checkpoint, data, phantoms, classes, alphas, seeds, out } => {
            let r = cfg.robustness.clone().unwrap_or_default();
            let data = match (data, phantoms) {
                (Some(path), _) => DataSource::Dir { path },
                (None, Some(count)) => {
                    let size = lodseg_core::nn::load_checkpoint(&checkpoint)?.config.input_shape[0];
                    DataSource::Phantom { count, seed, spec: PhantomSpec { size, ..PhantomSpec::default() } }
                }
                (None, None) => return Err(Error::Config("robustness needs --data or --phantoms".into())),
            };
            Job::Robustness {
                checkpoint,
                data,
                classes: classes.or(r.classes),
                alphas: alphas.or(r.alphas).unwrap_or_else(|| vec![0.0, 0.5, 1.0, 2.0, 3.0]),
                seeds: seeds.or(r.seeds).unwrap_or_else(|| vec![seed]),
                out,
            }
        }
        Command::AugmentPreview { input, labels, classes, count, out } => {
            let mut augmentation = cfg.augmentation.clone().unwrap_or_default();
            augmentation.seed = seed;
            Job::AugmentPreview { input, labels, classes, out, count, augmentation }
        }
        Command::MotionSim { input, alpha, events, output } => {
            let m = cfg.motion.clone().unwrap_or_default();
            let mut motion = MotionSpec::new(alpha.or(m.alpha).unwrap_or(1.0), seed);
            if let Some(n) = events.or(m.num_events) {
                motion.num_events = n;
            }
            Job::MotionSim { input, output, motion }
        }
        Command::Mesh { labels, classes, class, smoothing_iters, output } => {
            let m = cfg.mesh.clone().unwrap_or_default();
            Job::Mesh {
                labels,
                classes: classes.or(m.classes).unwrap_or_else(|| "raw7".into()),
                class: class.or(m.class).unwrap_or_else(|| "outer_gm".into()),
                smoothing_iters: smoothing_iters.or(m.smoothing_iters).unwrap_or(10),
                output,
            }
        }
        Command::Synth { out, count, size, classes } => {
            Job::Synth { out, count, seed, classes, phantom: PhantomSpec { size, ..PhantomSpec::default() } }
        }
        Command::Replay { manifest } => {
            let m = Manifest::load(&manifest)?;
            let mut job: Job = m.job_as()?;
            if let Job::Train { resume, .. } = &mut job {
                *resume = false;
            }
            job
        }
    })
}

fn init_logging(level: Option<&str>) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if let Some(l) = level {
        b.parse_filters(l);
    }
    b.format_timestamp(None).init();
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let level = cli.log_level.clone().or(cfg.log_level.clone());
    if let Some(l) = &level {
        l.parse::<log::LevelFilter>().map_err(|_| Error::Config(format!("--log-level: unknown level `{l}`")))?;
    }
    init_logging(level.as_deref());
    let workers = cli.workers.or(cfg.workers);
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--workers: {e}")))?;
    }
    let job = resolve(cli.command, &cfg, cli.seed.or(cfg.seed))?;
    job.validate()?;
    let outcome = job.run()?;
    let mut manifest = Manifest::new(job.name(), &job)?;
    manifest.seeds = outcome.seeds;
    manifest.outputs = outcome.outputs;
    manifest.workers = workers;
    let written = manifest.write_beside(&outcome.anchor)?;
    log::info!("manifest written to {}", written.display());
    println!("{}", serde_json::to_string(&outcome.summary).unwrap_or_default());
    Ok(())
}

/// Error messages already embed their sources, so one line is enough.
fn report(e: &Error) {
    eprintln!("error: {e}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            return ExitCode::from(if ok { 0 } else { 1 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
