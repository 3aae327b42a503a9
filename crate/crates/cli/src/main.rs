//! `odm`: run online data mixing simulations, compare strategies and
//! inspect saved policy state.

mod compare;
mod error;
mod manifest;
mod policy;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use odm_core::metrics::ReportFormat;

use crate::error::{CliError, CliResult};
use crate::manifest::{Invocation, RunManifest};
use crate::simulate::TraceFormat;

#[derive(Parser)]
#[command(name = "odm", version, about = "Online data mixing simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Output directory [default: <out-root>/<run name>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root for default output directories
    #[arg(long, env = "ODM_OUT_ROOT", default_value = "runs")]
    out_root: PathBuf,
    /// Report format
    #[arg(long, default_value = "csv", value_parser = parse_format)]
    format: ReportFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its trace, report, summary and state
    Simulate {
        /// Simulation config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Seed for policy, batches and noise; overrides the config
        #[arg(long)]
        seed: Option<u64>,
        /// Replace the config's strategy: odm, static or uniform
        #[arg(long)]
        strategy: Option<String>,
        /// Trace format; "none" skips the trace for long runs
        #[arg(long, value_enum, default_value = "jsonl")]
        trace_format: TraceFormat,
        /// Also save the policy state as it stands when this turn begins
        #[arg(long = "save-state-at", value_name = "TURN")]
        save_state_at: Vec<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Run several configs (or strategies) on one loss model and compare them
    Compare {
        /// Configs to compare; repeat the flag or list them
        #[arg(long = "config", value_name = "PATH")]
        config: Vec<PathBuf>,
        #[arg(value_name = "CONFIG")]
        configs: Vec<PathBuf>,
        /// Run each config once per strategy (repeatable)
        #[arg(long = "strategy")]
        strategies: Vec<String>,
        /// Seed applied to every member run
        #[arg(long)]
        seed: Option<u64>,
        /// Simulations run in parallel
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Read a saved policy state
    Policy {
        #[command(subcommand)]
        action: PolicyAction,
    },
    /// Repeat the run recorded in a manifest into a new directory
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PolicyAction {
    /// Print turn, exploration rates, reward estimates and distribution
    Inspect { state: PathBuf },
    /// Write the lossless JSON form of a state
    ExportJson {
        state: PathBuf,
        /// Destination file [default: stdout]
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_format(s: &str) -> Result<ReportFormat, String> {
    s.parse().map_err(|e: odm_core::Error| e.to_string())
}

fn stem(path: &std::path::Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { config, seed, strategy, trace_format, save_state_at, output } => {
            let out = output.out.unwrap_or_else(|| output.out_root.join(stem(&config)));
            simulate::run(&simulate::SimulateArgs {
                config,
                seed,
                out,
                strategy,
                format: output.format,
                trace_format,
                save_state_at,
            })
        }
        Command::Compare { mut config, configs, strategies, seed, workers, output } => {
            config.extend(configs);
            if config.is_empty() {
                return Err(CliError::usage("compare needs config files"));
            }
            let out = output.out.unwrap_or_else(|| output.out_root.join(format!("compare-{}", stem(&config[0]))));
            compare::run(&compare::CompareArgs { configs: config, seed, strategies, out, workers, format: output.format })
        }
        Command::Policy { action: PolicyAction::Inspect { state } } => policy::inspect(&state),
        Command::Policy { action: PolicyAction::ExportJson { state, out } } => policy::export_json(&state, out.as_ref()),
        Command::Replay { manifest, out } => replay(&manifest, out),
    }
}

fn replay(path: &std::path::Path, out: PathBuf) -> CliResult<()> {
    let m = RunManifest::read(path)?;
    m.check_inputs()?;
    let configs: Vec<PathBuf> = m.configs.iter().map(|c| c.path.clone()).collect();
    match m.invocation {
        Invocation::Simulate { seed, strategy, format, trace_format, save_state_at } => {
            let [config] = <[PathBuf; 1]>::try_from(configs).map_err(|_| CliError::usage("simulate manifest lists one config"))?;
            let trace_format = <TraceFormat as clap::ValueEnum>::from_str(&trace_format, false)
                .map_err(|e| CliError::usage(format!("trace format: {e}")))?;
            simulate::run(&simulate::SimulateArgs {
                config,
                seed,
                out,
                strategy,
                format: parse_format(&format).map_err(CliError::usage)?,
                trace_format,
                save_state_at,
            })
        }
        Invocation::Compare { seed, strategies, workers, format } => compare::run(&compare::CompareArgs {
            configs,
            seed,
            strategies,
            out,
            workers,
            format: parse_format(&format).map_err(CliError::usage)?,
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.code)
        }
    }
}
