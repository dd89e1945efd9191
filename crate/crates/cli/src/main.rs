use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use egoscene::pipeline::{self, PlanInputs, RunConfig};
use egoscene::Error;
use log::error;

/// Guided diffusion scenario generation and ego-centric dataset conversion.
///
/// Stages read and write under the run root given by --out:
/// train/, generate/, reference/, convert/, eval/, render/.
#[derive(Parser, Debug)]
#[command(name = "egoscene", version)]
struct Cli {
    /// JSON run config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run root directory.
    #[arg(long, global = true, env = "EGOSCENE_OUT", default_value = "runs")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the denoiser on procedural scenes.
    Train,
    /// Sample scenes with the trained model.
    Generate {
        /// Defaults to <out>/train/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write procedural reference scenes to <out>/reference instead.
        #[arg(long)]
        reference: bool,
    },
    /// Turn generated scenes into ego-centric instances.
    Convert {
        /// Defaults to <out>/generate.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Score generated scenes against reference scenes.
    Eval {
        /// Defaults to <out>/generate.
        #[arg(long)]
        gen: Option<PathBuf>,
        /// Defaults to <out>/reference.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Planning predictions JSON; needs the dataset they refer to.
        #[arg(long, requires = "dataset")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// SVGs of a scene directory or channel PGMs of a dataset.
    Render {
        /// Defaults to <out>/generate.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Timestep to draw.
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite(_) | Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_dir(cli: &Cli, cfg: &RunConfig, stage: &str) -> Result<PathBuf, Error> {
    let dir = cli.out.join(stage);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    cfg.save(&dir.join("config.json"))?;
    Ok(dir)
}

fn or_default(p: &Option<PathBuf>, root: &Path, rel: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| root.join(rel))
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let root = &cli.out;
    match &cli.command {
        Command::Train => {
            let out = stage_dir(cli, &cfg, "train")?;
            let ckpt = pipeline::cmd_train(&cfg, &out)?;
            println!("checkpoint {}", ckpt.display());
        }
        Command::Generate {
            checkpoint,
            reference,
        } => {
            let (out, ckpt) = if *reference {
                (stage_dir(cli, &cfg, "reference")?, None)
            } else {
                let c = or_default(checkpoint, root, "train/checkpoint.bin");
                (stage_dir(cli, &cfg, "generate")?, Some(c))
            };
            let m = pipeline::cmd_generate(&cfg, ckpt.as_deref(), &out)?;
            println!("{} scenes in {}", m.scenes.len(), out.display());
        }
        Command::Convert { scenes } => {
            let input = or_default(scenes, root, "generate");
            let out = stage_dir(cli, &cfg, "convert")?;
            let rows = pipeline::cmd_convert(&cfg, &input, &out)?;
            for r in &rows {
                match r.ego {
                    Some(e) => println!(
                        "{}: ego {e}, {} instances, {} kept",
                        r.file, r.instances, r.kept
                    ),
                    None => println!("{}: skipped, no eligible ego", r.file),
                }
            }
            let kept: usize = rows.iter().map(|r| r.kept).sum();
            println!("{kept} instances in {}", out.display());
        }
        Command::Eval {
            gen,
            reference,
            predictions,
            dataset,
        } => {
            let gen = or_default(gen, root, "generate");
            let reference = or_default(reference, root, "reference");
            let plan = match (dataset, predictions) {
                (Some(d), Some(p)) => Some(PlanInputs {
                    dataset: d,
                    predictions: p,
                }),
                _ => None,
            };
            let out = stage_dir(cli, &cfg, "eval")?;
            let report = pipeline::cmd_eval(&cfg, &gen, &reference, plan, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Render { input, step } => {
            let input = or_default(input, root, "generate");
            let out = stage_dir(cli, &cfg, "render")?;
            let n = pipeline::cmd_render(&cfg, &input, *step, &out)?;
            println!("rendered {n} items to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            error!("cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
