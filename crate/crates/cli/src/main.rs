use std::path::PathBuf;
use std::process::ExitCode;

use cfam_cli::commands::{cmd_cv, cmd_fit, cmd_predict, cmd_simulate};
use cfam_cli::{CliError, CliResult, RunConfig};
use cfam_core::Augmentation;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cfam", version, about = "Constrained functional additive models for treatment rules")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model (cross-validated unless --lambda is given).
    Fit(ModelArgs),
    /// Cross-validate the penalty path only.
    Cv(ModelArgs),
    /// Score subjects with a saved model.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a simulation preset.
    Simulate {
        /// table1, figure1, figure3, table_s2 or appendix_a5.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    linear_mode: bool,
    #[arg(long, value_enum)]
    augment: Option<Augment>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Augment {
    None,
    Lasso,
    Fam,
}

impl From<Augment> for Augmentation {
    fn from(a: Augment) -> Self {
        match a {
            Augment::None => Augmentation::None,
            Augment::Lasso => Augmentation::Lasso,
            Augment::Fam => Augmentation::Fam,
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    match &cli.command {
        Command::Fit(m) | Command::Cv(m) => {
            if m.data.is_some() {
                cfg.data_dir = m.data.clone();
            }
            if m.lambda.is_some() {
                cfg.lambda = m.lambda;
            }
            if let Some(f) = m.folds {
                cfg.folds = f;
            }
            if m.linear_mode {
                cfg.linear_mode = true;
            }
            if let Some(a) = m.augment {
                cfg.augment = a.into();
            }
        }
        Command::Predict { model, data } => {
            if model.is_some() {
                cfg.model = model.clone();
            }
            if data.is_some() {
                cfg.data_dir = data.clone();
            }
        }
        Command::Simulate { preset, reps } => {
            if preset.is_some() {
                cfg.preset = preset.clone();
            }
            if reps.is_some() {
                cfg.reps = *reps;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(cli)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {t} threads: {e}")))?;
    }
    match cli.command {
        Command::Fit(_) => cmd_fit(&cfg).map(drop),
        Command::Cv(_) => cmd_cv(&cfg).map(drop),
        Command::Predict { .. } => cmd_predict(&cfg).map(drop),
        Command::Simulate { .. } => cmd_simulate(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", e.machine_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
