//! Runs the simulator scenarios from a TOML config and command-line
//! overrides. Each run writes its artifacts under the output directory and
//! prints a JSON summary on stdout.

pub mod config;
pub mod scenarios;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;

pub use config::{ExperimentConfig, Scenario};

/// Exit code of a successful run.
pub const EXIT_OK: i32 = 0;
/// Bad arguments or configuration.
pub const EXIT_USAGE: i32 = 1;
/// The scenario ran but failed or missed its goal.
pub const EXIT_FAILED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sevstep", version, about = "Single-stepping side-channel simulator")]
struct Cli {
    /// TOML file of settings layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    /// Print the effective configuration as dotted keys and exit.
    #[arg(long)]
    print_config: bool,
}

fn resolve(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.scenario {
        cfg.scenario = s;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.sim.knobs.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first), runs the scenario and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_USAGE;
        }
    };
    if cli.print_config {
        return match cfg.reference() {
            Ok(text) => match stdout.write_all(text.as_bytes()) {
                Ok(()) => EXIT_OK,
                Err(_) => EXIT_FAILED,
            },
            Err(e) => {
                eprintln!("error: {e:#}");
                EXIT_USAGE
            }
        };
    }
    if cfg.threads > 0 {
        // Fails only if a pool already exists, e.g. when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    log::info!("scenario {} seed {} -> {}", cfg.scenario.name(), cfg.seed, cfg.out.display());
    match scenarios::run_scenario(&cfg) {
        Ok(outcome) => {
            let text = serde_json::to_string_pretty(&outcome.summary).unwrap_or_default();
            if writeln!(stdout, "{text}").is_err() {
                return EXIT_FAILED;
            }
            if outcome.success {
                EXIT_OK
            } else {
                eprintln!("scenario {} did not reach its goal", cfg.scenario.name());
                EXIT_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILED
        }
    }
}
