use std::fs;
use std::path::{Path, PathBuf};

use odm_core::metrics::{cumulative_sampling_distribution, export_report, EvalReport, Report, ReportFormat, ShareChange};
use odm_core::simulator::trace::{write_binary, write_jsonl};
use odm_core::simulator::Simulation;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{load_config, Invocation, RunManifest};

/// Largest moves up and down reported in the summary.
const TOP_CHANGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TraceFormat {
    Jsonl,
    Bin,
    None,
}

impl TraceFormat {
    pub fn name(self) -> &'static str {
        match self {
            TraceFormat::Jsonl => "jsonl",
            TraceFormat::Bin => "bin",
            TraceFormat::None => "none",
        }
    }
}

pub struct SimulateArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub strategy: Option<String>,
    pub format: ReportFormat,
    pub trace_format: TraceFormat,
    pub save_state_at: Vec<u64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    name: &'a str,
    strategy: &'a str,
    seed: u64,
    turns: u64,
    accumulation_steps: usize,
    total_samples: u64,
    domains: &'a [String],
    initial_weights: &'a [f64],
    counts: &'a [u64],
    shares: &'a [f64],
    increased: &'a [ShareChange],
    decreased: &'a [ShareChange],
    tokens_served: &'a [u64],
    final_evaluation: Option<&'a EvalReport>,
}

pub fn format_name(f: ReportFormat) -> &'static str {
    match f {
        ReportFormat::Csv => "csv",
        ReportFormat::JsonLines => "jsonl",
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io("cannot create output directory", dir, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io("cannot write output", path, e))
}

pub fn run(args: &SimulateArgs) -> CliResult<()> {
    let loaded = load_config(&args.config, args.seed)?;
    let mut config = loaded.config.clone();
    if let Some(kind) = &args.strategy {
        config = config.with_strategy_kind(kind)?;
    }
    if let Some(t) = args.save_state_at.iter().find(|t| **t == 0 || **t > config.total_turns) {
        return Err(CliError::usage(format!("--save-state-at {t} is outside turns 1..={}", config.total_turns)));
    }

    create_dir(&args.out)?;
    let invocation = Invocation::Simulate {
        seed: args.seed,
        strategy: args.strategy.clone(),
        format: format_name(args.format).into(),
        trace_format: args.trace_format.name().into(),
        save_state_at: args.save_state_at.clone(),
    };
    RunManifest::new(invocation, std::slice::from_ref(&loaded), std::slice::from_ref(&config), &args.out)
        .write(&args.out)?;

    let mut sim = Simulation::new(config.clone())?;
    let mut records = Vec::with_capacity(config.total_turns as usize);
    while !sim.is_finished() {
        if args.save_state_at.contains(&sim.next_turn()) {
            let path = args.out.join(format!("state-turn-{}.odm", sim.next_turn()));
            write_file(&path, sim.policy().save())?;
        }
        records.push(sim.step()?);
    }
    let final_state = sim.policy().save();
    let trace = sim.into_trace(records);

    match args.trace_format {
        TraceFormat::Jsonl => write_jsonl(&trace.records, &args.out.join("trace.jsonl"))?,
        TraceFormat::Bin => {
            write_binary(&trace.records, trace.num_domains(), trace.accumulation_steps, &args.out.join("trace.bin"))?
        }
        TraceFormat::None => {}
    }

    let summary = cumulative_sampling_distribution(&trace, TOP_CHANGES)?;
    let report = Report::new(trace.domain_names.clone(), &trace.evaluations, Some(&summary))?;
    export_report(&report, &args.out.join(format!("report.{}", format_name(args.format))), args.format)?;

    let total_samples: u64 = summary.counts.iter().sum();
    let body = Summary {
        name: &trace.name,
        strategy: &trace.strategy,
        seed: config.seed,
        turns: trace.records.len() as u64,
        accumulation_steps: trace.accumulation_steps,
        total_samples,
        domains: &trace.domain_names,
        initial_weights: &trace.initial_weights,
        counts: &summary.counts,
        shares: &summary.shares,
        increased: &summary.increased,
        decreased: &summary.decreased,
        tokens_served: &trace.tokens_served,
        final_evaluation: trace.final_evaluation(),
    };
    write_file(&args.out.join("summary.json"), serde_json::to_string_pretty(&body).expect("summary serializes") + "\n")?;
    write_file(&args.out.join("state.odm"), final_state)?;

    println!("run: {} ({})", trace.name, trace.strategy);
    println!("seed: {}", config.seed);
    println!("turns: {}", trace.records.len());
    println!("samples: {total_samples}");
    if let Some(e) = trace.final_evaluation() {
        println!("final avg loss: {:.6}", e.avg_loss);
        println!("final avg ppl: {:.6}", e.avg_ppl);
    }
    println!("output: {}", args.out.display());
    Ok(())
}
