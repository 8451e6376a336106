use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim_core::report::{emit, emit_sweep, Format};
use fedsim_core::scenario::{self, load_scenario, resolve_seed, ScenarioConfig, ScenarioError, SEED_ENV};

/// Federated cloud simulator.
#[derive(Parser)]
#[command(name = "fedsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and emit its report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write the report into this directory instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a burst scenario once per public fraction.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated fractions; defaults to the scenario's sweep list.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed and FEDSIM_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "csv")]
    format: Format,
}

fn load(common: &Common) -> Result<ScenarioConfig, ScenarioError> {
    let mut cfg = load_scenario(&common.scenario)?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.seed = resolve_seed(common.seed, env.as_deref(), cfg.seed)?;
    Ok(cfg)
}

fn write_out(bytes: &[u8], out: Option<&Path>, scenario: &Path, format: Format) -> Result<(), ScenarioError> {
    match out {
        None => {
            std::io::stdout().write_all(bytes).map_err(|source| ScenarioError::Io { path: "<stdout>".into(), source })?;
        }
        Some(dir) => {
            let io = |source| ScenarioError::Io { path: dir.to_path_buf(), source };
            fs::create_dir_all(dir).map_err(io)?;
            let stem = scenario.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let ext = match format {
                Format::Csv => "csv",
                Format::Table => "txt",
            };
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, bytes).map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn execute(command: Command) -> Result<(), ScenarioError> {
    match command {
        Command::Run { common, out } => {
            let cfg = load(&common)?;
            let report = scenario::run(&cfg)?;
            write_out(&emit(&report, common.format), out.as_deref(), &common.scenario, common.format)
        }
        Command::Sweep { common, fractions } => {
            let cfg = load(&common)?;
            let fractions = match fractions {
                Some(f) => f,
                None => cfg.burst.as_ref().and_then(|b| b.sweep.clone()).ok_or_else(|| ScenarioError::Validation {
                    key: "fractions".into(),
                    reason: "pass --fractions or set burst.sweep in the scenario".into(),
                })?,
            };
            let rows = scenario::sweep(&cfg, &fractions)?;
            write_out(&emit_sweep(&rows, common.format), None, &common.scenario, common.format)
        }
        Command::Validate { scenario } => {
            let cfg = load_scenario(&scenario)?;
            println!("ok {} ({} providers, hash {})", scenario.display(), cfg.providers.len(), cfg.hash());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
