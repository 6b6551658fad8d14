use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use stokes_rve::config::{Mode, RunConfig};
use stokes_rve::runner::{run, RunError};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Effective,
    Dilute,
    Ensemble,
    Twoscale,
    Validate,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Effective => Mode::Effective,
            ModeArg::Dilute => Mode::Dilute,
            ModeArg::Ensemble => Mode::Ensemble,
            ModeArg::Twoscale => Mode::Twoscale,
            ModeArg::Validate => Mode::Validate,
        }
    }
}

/// Effective viscosity of rigid-particle suspensions from periodic Stokes
/// cell problems.
#[derive(Debug, Parser)]
#[command(name = "stokes-rve", version)]
struct Cli {
    mode: ModeArg,
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Debug logging.
    #[arg(short, long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    let mut cfg = match RunConfig::from_file(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail(&RunError::Config(e)),
    };
    let mode = Mode::from(cli.mode);
    if cfg.mode != mode {
        log::info!("mode {mode:?} from the command line replaces {:?}", cfg.mode);
        cfg.mode = mode;
    }
    if let Some(s) = cli.seed_override {
        cfg = cfg.with_seed(s);
    }
    if let Some(dir) = cli.out {
        cfg.output.dir = dir;
    }
    match run(&cfg) {
        Ok(out) => {
            for c in &out.checks {
                println!("PASS {}: {}", c.name, c.detail);
            }
            for a in &out.artifacts {
                log::info!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if mode == Mode::Validate {
                if let Ok(txt) = std::fs::read_to_string(cfg.output.dir.join("validate.txt")) {
                    print!("{txt}");
                }
            }
            fail(&e)
        }
    }
}

fn fail(e: &RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}
