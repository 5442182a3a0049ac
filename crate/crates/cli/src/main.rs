use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vtprune_core::{Error, ExperimentConfig};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "vtprune",
    version,
    about = "Visual token pruning lab on synthetic attention traces"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON experiment config; defaults apply to absent fields.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `dvtie.lambda=0.1`.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory receiving every artifact of the run.
    #[arg(long, short, default_value = "vtprune-out", global = true)]
    out: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Worker threads for scene-parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic attention traces as JSON.
    GenTraces {
        /// Scene split; seeds differ per split.
        #[arg(long, default_value = "train", value_parser = ["train", "eval", "debias"])]
        split: String,
        /// Number of traces; defaults to the split's scene count.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the importance estimator and save a checkpoint.
    Train,
    /// Rank correlation of a checkpoint's scores with held-out targets.
    Evaluate {
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Pruning simulation report; trains first unless a checkpoint is given.
    Prune {
        /// Checkpoint written by `train`; skips training.
        #[arg(long, conflicts_with = "sweep")]
        model: Option<PathBuf>,
        /// Rerun per value of one axis, e.g. `K=0,1,2,3` or `lambda=0,0.1`.
        #[arg(long, value_name = "AXIS=V1,V2,...")]
        sweep: Option<String>,
    },
    /// Target quality against planted importance for each skip depth K.
    DebiasSweep,
    /// Finite-difference check of the estimator's gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(Error),
    Validation(Error),
    Runtime(Error),
    /// The command ran but its check did not pass.
    Check(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Config(_) => "config",
            Failure::Validation(_) => "validation",
            Failure::Runtime(_) => "runtime",
            Failure::Check(_) => "check",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Config(_) => 2,
            Failure::Validation(_) => 3,
            Failure::Runtime(_) | Failure::Check(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Check(m) => m.clone(),
            Failure::Config(e) | Failure::Validation(e) | Failure::Runtime(e) => e.to_string(),
        }
    }
}

/// Runtime errors that are really bad input are reported as such.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Validation(e),
            Error::Override(_) => Failure::Config(e),
            e => Failure::Runtime(e),
        }
    }
}

fn report_failure(f: &Failure) -> ExitCode {
    let line = serde_json::json!({
        "error": f.kind(),
        "exit_code": f.code(),
        "message": f.message(),
    });
    eprintln!("{line}");
    ExitCode::from(f.code())
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig, Failure> {
    let base = match &global.config {
        Some(path) => ExperimentConfig::load(path).map_err(Failure::Config)?,
        None => ExperimentConfig::default(),
    };
    base.with_overrides(&global.overrides)
        .map_err(Failure::Config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            return report_failure(&Failure::Usage(
                first.trim_start_matches("error: ").to_string(),
            ));
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();

    if let Some(n) = cli.global.threads {
        if n == 0 {
            return report_failure(&Failure::Usage("--threads must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            return report_failure(&Failure::Usage(e.to_string()));
        }
    }

    let result = load_config(&cli.global)
        .and_then(|config| commands::run(&cli.command, config, &cli.global.out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report_failure(&f),
    }
}
