mod commands;
mod config;

use std::path::PathBuf;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use irrcnn::data::PatchMode;
use irrcnn::gradcheck::GradcheckConfig;
use irrcnn::{Error, ErrorKind, Result};

use crate::commands::{parse_enum, parse_flag};
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "irrcnn", version, about = "Inception recurrent residual CNNs for histopathology image classification")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed; overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory. Inputs are never modified.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Worker threads for data stages and tensor kernels.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan an image directory into a manifest.
    Ingest {
        #[arg(long)]
        root: Option<PathBuf>,
        /// breakhis or challenge2015.
        #[arg(long)]
        dataset: Option<String>,
        /// 40, 100, 200 or 400.
        #[arg(long)]
        magnification: Option<String>,
    },
    /// Assign records to train and test with no patient in both.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long = "train-frac")]
        train_frac: Option<f64>,
    },
    /// Write augmented copies of every image.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Resize images or cut them into patches.
    Patch {
        #[arg(long)]
        manifest: PathBuf,
        /// resize, center or random.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        size: Option<u32>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides train.initial_lr.
        #[arg(long)]
        lr: Option<f64>,
        /// Independent runs from seeds seed, seed+1, ..., each in out/restart_<i>.
        #[arg(long, default_value_t = 1)]
        restarts: usize,
    },
    /// Evaluate a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// image or patient.
        #[arg(long)]
        level: Option<String>,
        /// none, wta or mean.
        #[arg(long)]
        aggregate: Option<String>,
        /// train, test or all.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        magnification: Option<String>,
    },
    /// Finite-difference check of every differentiable operation and block.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Mean and standard deviation of metrics over several eval reports.
    Report {
        /// report.json files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    }
}

fn fail(kind: ErrorKind, message: &str) -> i32 {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("irrcnn: error[{}]: {one_line}", kind_name(kind));
    exit_code(kind)
}

fn parse_patch_mode(value: &str) -> Result<PatchMode> {
    let canonical = match value {
        "center" => "center_patch",
        "random" => "random_patch",
        other => other,
    };
    parse_enum("mode", canonical)
}

/// Loads the config file and applies command-line overrides.
fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Ingest {
            root,
            dataset,
            magnification,
        } => {
            if let Some(r) = root {
                cfg.dataset.root = Some(r.clone());
            }
            if let Some(d) = dataset {
                cfg.dataset.id = parse_flag("dataset", d)?;
            }
            if let Some(m) = magnification {
                cfg.dataset.magnification = Some(parse_flag("magnification", m)?);
            }
        }
        Command::Split { train_frac, .. } => {
            if let Some(f) = train_frac {
                cfg.dataset.train_fraction = *f;
            }
        }
        Command::Patch { mode, size, count, .. } => {
            if let Some(m) = mode {
                cfg.pipeline.mode = parse_patch_mode(m)?;
            }
            if let Some(s) = size {
                cfg.pipeline.patch_size = *s;
            }
            if let Some(c) = count {
                cfg.pipeline.patch_count = *c;
            }
        }
        Command::Train { lr, .. } => {
            if let Some(lr) = lr {
                cfg.train.initial_lr = *lr;
            }
        }
        Command::Eval {
            level,
            aggregate,
            split,
            magnification,
            ..
        } => {
            if let Some(l) = level {
                cfg.eval.level = parse_enum("level", l)?;
            }
            if let Some(a) = aggregate {
                cfg.eval.aggregation = parse_enum("aggregate", a)?;
            }
            if let Some(s) = split {
                cfg.eval.split = if s == "all" { None } else { Some(parse_flag("split", s)?) };
            }
            if let Some(m) = magnification {
                cfg.eval.magnification = Some(parse_flag("magnification", m)?);
            }
        }
        Command::Augment { .. } | Command::Gradcheck { .. } | Command::Report { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let cfg = resolve(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::Ingest { .. } => commands::ingest_cmd(&cfg, out)?,
        Command::Split { manifest, .. } => commands::split_cmd(&cfg, manifest, out)?,
        Command::Augment { manifest } => commands::augment_cmd(&cfg, manifest, out)?,
        Command::Patch { manifest, .. } => commands::patch_cmd(&cfg, manifest, out)?,
        Command::Train { manifest, restarts, .. } => commands::train_cmd(&cfg, manifest, *restarts, out)?,
        Command::Eval {
            checkpoint, manifest, ..
        } => commands::eval_cmd(&cfg, checkpoint, manifest, out)?,
        Command::Gradcheck {
            tolerance,
            trials,
            inject_fault,
        } => {
            let gc = GradcheckConfig {
                seed: cfg.seed,
                trials: *trials,
                tolerance: *tolerance,
                inject_fault: inject_fault.clone(),
                ..GradcheckConfig::default()
            };
            if !commands::gradcheck_cmd(&gc, out)? {
                return Ok(fail(ErrorKind::Numeric, "gradient check failed"));
            }
        }
        Command::Report { reports } => commands::report_cmd(&cfg, reports, out)?,
    }
    Ok(0)
}

fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let keys = config::keys_help();
    let command = Cli::command()
        .after_help(keys.clone())
        .mut_subcommands(|s| s.after_help(keys.clone()));
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
            }
            let text = e.to_string();
            let head = text.split("Usage:").next().unwrap_or("invalid arguments");
            return fail(ErrorKind::Usage, head.trim().trim_start_matches("error: "));
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return fail(ErrorKind::Usage, &e.to_string()),
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}

fn main() {
    std::process::exit(run());
}
