use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use odm_core::metrics::{bucket_domains, cumulative_sampling_distribution, export_report, format_real, Report, ReportFormat};
use odm_core::simulator::{final_smoothed_loss, iterations_to_target, run_baseline_suite, SimulationConfig, Trace};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::{load_config, Invocation, LoadedConfig, RunManifest};
use crate::simulate::{create_dir, format_name};

pub struct CompareArgs {
    pub configs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub strategies: Vec<String>,
    pub out: PathBuf,
    pub workers: usize,
    pub format: ReportFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub strategy: String,
    pub final_avg_loss: f64,
    pub final_avg_ppl: f64,
    /// Best final smoothed loss among the other rows.
    pub target_avg_loss: f64,
    pub target_from: String,
    pub iterations_to_target: Option<u64>,
    /// Turns the row that set the target needed to reach it.
    pub target_iterations: Option<u64>,
    pub iterations_ratio: Option<f64>,
    pub best: usize,
    pub middle: usize,
    pub worst: usize,
}

/// One row per trace; each is measured against the best of the others.
pub fn comparison_rows(traces: &[Trace]) -> CliResult<Vec<CompareRow>> {
    let finals: Vec<f64> = traces
        .iter()
        .map(|t| final_smoothed_loss(t).ok_or_else(|| CliError::runtime(format!("{} has no evaluations", t.name))))
        .collect::<CliResult<_>>()?;
    let per_domain: Vec<(String, Vec<f64>)> = traces
        .iter()
        .map(|t| (t.name.clone(), t.final_evaluation().expect("checked above").losses.clone()))
        .collect();
    let (buckets, _) = bucket_domains(&per_domain)?;
    Ok(traces
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (j, target) = finals
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, l)| (j, *l))
                .expect("at least two traces");
            let own = iterations_to_target(t, target);
            let reference = iterations_to_target(&traces[j], target);
            let last = t.final_evaluation().expect("checked above");
            CompareRow {
                name: t.name.clone(),
                strategy: t.strategy.clone(),
                final_avg_loss: last.avg_loss,
                final_avg_ppl: last.avg_ppl,
                target_avg_loss: target,
                target_from: traces[j].name.clone(),
                iterations_to_target: own,
                target_iterations: reference,
                iterations_ratio: own.zip(reference).map(|(a, b)| a as f64 / b as f64),
                best: buckets[i].best,
                middle: buckets[i].middle,
                worst: buckets[i].worst,
            }
        })
        .collect())
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

const COLUMNS: [&str; 12] = [
    "name",
    "strategy",
    "final_avg_loss",
    "final_avg_ppl",
    "target_avg_loss",
    "target_from",
    "iterations_to_target",
    "target_iterations",
    "iterations_ratio",
    "best",
    "middle",
    "worst",
];

fn write_rows(rows: &[CompareRow], path: &Path, format: ReportFormat) -> CliResult<()> {
    let file = File::create(path).map_err(|e| CliError::io("cannot create comparison", path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| CliError::io("cannot write comparison", path, e);
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            let csv_err = |e: csv::Error| CliError::runtime(format!("{}: {e}", path.display()));
            w.write_record(COLUMNS).map_err(csv_err)?;
            for r in rows {
                w.write_record([
                    r.name.clone(),
                    r.strategy.clone(),
                    format_real(r.final_avg_loss),
                    format_real(r.final_avg_ppl),
                    format_real(r.target_avg_loss),
                    r.target_from.clone(),
                    opt(r.iterations_to_target),
                    opt(r.target_iterations),
                    r.iterations_ratio.map(format_real).unwrap_or_default(),
                    r.best.to_string(),
                    r.middle.to_string(),
                    r.worst.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(io)?;
        }
        ReportFormat::JsonLines => {
            let header = serde_json::json!({ "schema": "odm-compare", "version": 1, "columns": COLUMNS });
            writeln!(out, "{header}").map_err(io)?;
            for r in rows {
                serde_json::to_writer(&mut out, r).expect("rows serialize");
                writeln!(out).map_err(io)?;
            }
        }
    }
    drop(out);
    Ok(())
}

fn print_table(rows: &[CompareRow]) {
    println!(
        "{:<20} {:<8} {:>12} {:>12} {:>10} {:>8} {:>6} {:>6} {:>6}",
        "name", "strategy", "final loss", "final ppl", "to target", "ratio", "best", "middle", "worst"
    );
    for r in rows {
        println!(
            "{:<20} {:<8} {:>12.6} {:>12.6} {:>10} {:>8} {:>6} {:>6} {:>6}",
            r.name,
            r.strategy,
            r.final_avg_loss,
            r.final_avg_ppl,
            opt(r.iterations_to_target),
            r.iterations_ratio.map_or_else(String::new, |x| format!("{x:.4}")),
            r.best,
            r.middle,
            r.worst
        );
    }
}

fn members(loaded: &[LoadedConfig], strategies: &[String]) -> CliResult<Vec<SimulationConfig>> {
    let mut out = Vec::new();
    for l in loaded {
        if strategies.is_empty() {
            out.push(l.config.clone());
        }
        for s in strategies {
            let mut c = l.config.clone().with_strategy_kind(s)?;
            c.name = format!("{}-{s}", l.config.name);
            out.push(c);
        }
    }
    if out.len() < 2 {
        return Err(CliError::usage("compare needs at least two runs (configs x strategies)"));
    }
    Ok(out)
}

pub fn run(args: &CompareArgs) -> CliResult<()> {
    let loaded = args.configs.iter().map(|p| load_config(p, args.seed)).collect::<CliResult<Vec<_>>>()?;
    let configs = members(&loaded, &args.strategies)?;
    odm_core::simulator::check_compatible(&configs)?;

    create_dir(&args.out)?;
    let invocation = Invocation::Compare {
        seed: args.seed,
        strategies: args.strategies.clone(),
        workers: args.workers,
        format: format_name(args.format).into(),
    };
    RunManifest::new(invocation, &loaded, &configs, &args.out).write(&args.out)?;

    let traces = run_baseline_suite(&configs, args.workers)?;
    let ext = format_name(args.format);
    for (i, t) in traces.iter().enumerate() {
        let summary = cumulative_sampling_distribution(t, 3)?;
        let report = Report::new(t.domain_names.clone(), &t.evaluations, Some(&summary))?;
        export_report(&report, &args.out.join(format!("report-{i}-{}.{ext}", t.name)), args.format)?;
    }
    let rows = comparison_rows(&traces)?;
    write_rows(&rows, &args.out.join(format!("compare.{ext}")), args.format)?;
    print_table(&rows);
    Ok(())
}
