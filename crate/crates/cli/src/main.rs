use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use terrain_twin::config::AppConfig;
use terrain_twin::pipeline;

const THREADS_VAR: &str = "TERRAIN_TWIN_THREADS";

/// Terrain segmentation on procedurally generated worlds.
#[derive(Debug, Parser)]
#[command(name = "terrain-twin", version, about)]
struct Cli {
    /// `key = value` config file, applied over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides a single setting, e.g. `--set train.learning_rate=1e-3`.
    /// Applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesise a world and write a labelled patch dataset.
    Gen {
        /// Seeds the world, the patch sampler and the labeller.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a U-Net on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the log and checkpoints [default: the data directory]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        val_every: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Compute per-class ROC/AUC and Jaccard for a checkpoint.
    Eval {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate every patch instead of the validation split.
        #[arg(long)]
        all: bool,
        /// Also render the ROC curves as P6 images.
        #[arg(long)]
        plot: bool,
    },
    /// Segment a P6 image of any size by tiling.
    Infer {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write one binary mosaic per class.
        #[arg(long)]
        binary: bool,
    },
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn threads_from_env() -> anyhow::Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_VAR}={v:?} is not a thread count"))?;
            Ok((n > 0).then_some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{THREADS_VAR}: {e}"),
    }
}

/// Builds the resolved config; errors here are usage errors.
fn resolve(cli: &Cli) -> anyhow::Result<AppConfig> {
    let mut cfg = AppConfig::default();
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    cfg.apply_overrides(&cli.overrides)?;
    let mut flags = Vec::new();
    match &cli.command {
        Command::Gen { seed, patches, .. } => {
            if let Some(s) = seed {
                for k in ["world.seed", "sampler.seed", "labeler.seed"] {
                    flags.push(format!("{k}={s}"));
                }
            }
            if let Some(n) = patches {
                flags.push(format!("sampler.n_patches={n}"));
            }
        }
        Command::Train { epochs, val_every, .. } => {
            if let Some(e) = epochs {
                flags.push(format!("train.max_epochs={e}"));
            }
            if let Some(v) = val_every {
                flags.push(format!("train.val_every={v}"));
            }
        }
        _ => {}
    }
    cfg.apply_overrides(&flags)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(cfg: &AppConfig) {
    println!("# resolved configuration");
    for line in cfg.to_text().lines() {
        println!("#   {line}");
    }
}

fn run(cli: &Cli, cfg: &AppConfig) -> anyhow::Result<bool> {
    let mut progress = |s: &str| println!("{s}");
    match &cli.command {
        Command::Gen { out, .. } => {
            pipeline::run_gen(cfg, out, &mut progress)?;
        }
        Command::Train { data, out, resume, .. } => {
            let out = out.as_deref().unwrap_or(data);
            pipeline::run_train(cfg, data, out, resume.as_deref(), &mut progress)?;
        }
        Command::Eval { model, data, out, all, plot } => {
            pipeline::run_eval(cfg, model, data, out, *all, *plot, &mut progress)?;
        }
        Command::Infer { model, image, out, binary } => {
            pipeline::run_infer(cfg, model, image, out, *binary, &mut progress)?;
        }
        Command::Gradcheck { seed } => {
            let results = pipeline::run_gradcheck(*seed, &mut progress)?;
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                eprintln!("error: {failed} gradient check(s) failed");
                return Ok(false);
            }
            println!("all {} gradient checks passed", results.len());
        }
    }
    Ok(true)
}

fn exists(p: &Path) -> anyhow::Result<()> {
    if !p.exists() {
        bail!("{} does not exist", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    let cfg = match resolve(&cli).and_then(|c| threads_from_env().map(|t| (c, t))) {
        Ok((cfg, threads)) => {
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            }
            cfg
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let inputs: Vec<&Path> = match &cli.command {
        Command::Train { data, resume, .. } => std::iter::once(data.as_path()).chain(resume.as_deref()).collect(),
        Command::Eval { model, data, .. } => vec![model, data],
        Command::Infer { model, image, .. } => vec![model, image],
        _ => vec![],
    };
    if let Err(e) = inputs.into_iter().try_for_each(exists) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    print_config(&cfg);
    match run(&cli, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
