//! Measurement quantities over traces: unweighted average held-out loss and
//! perplexity, the cumulative sampling distribution, and best/middle/worst
//! bucketing of strategies per domain. Plus plot-ready CSV / JSON-lines
//! export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::Trace;

pub const REPORT_SCHEMA: &str = "odm-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub turn: u64,
    pub losses: Vec<f64>,
    pub perplexities: Vec<f64>,
    pub avg_loss: f64,
    /// Mean of per-domain perplexities, not `exp(avg_loss)`.
    pub avg_ppl: f64,
}

impl EvalReport {
    pub fn from_losses(turn: u64, losses: Vec<f64>) -> Result<Self> {
        let (avg_loss, avg_ppl) = unweighted_average(&losses)?;
        let perplexities = losses.iter().map(|l| l.exp()).collect();
        Ok(Self {
            turn,
            losses,
            perplexities,
            avg_loss,
            avg_ppl,
        })
    }

    /// Perplexity of the average loss; never above `avg_ppl`.
    pub fn exp_avg_loss(&self) -> f64 {
        self.avg_loss.exp()
    }
}

/// Equal-weight mean loss and mean per-domain perplexity.
pub fn unweighted_average(losses: &[f64]) -> Result<(f64, f64)> {
    if losses.is_empty() {
        return Err(Error::Report("need at least one domain".into()));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite { what: "loss", value: *bad });
    }
    let k = losses.len() as f64;
    let avg_loss = losses.iter().sum::<f64>() / k;
    let avg_ppl = losses.iter().map(|l| l.exp()).sum::<f64>() / k;
    Ok((avg_loss, avg_ppl))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningShare {
    pub turn: u64,
    pub shares: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareChange {
    pub domain: usize,
    pub initial: f64,
    pub final_share: f64,
}

impl ShareChange {
    pub fn delta(&self) -> f64 {
        self.final_share - self.initial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSummary {
    pub counts: Vec<u64>,
    pub shares: Vec<f64>,
    /// Share of samples per domain through each turn.
    pub running: Vec<RunningShare>,
    /// Largest increases over the initial weights, biggest first.
    pub increased: Vec<ShareChange>,
    /// Largest decreases, biggest drop first.
    pub decreased: Vec<ShareChange>,
}

impl SamplingSummary {
    pub fn running_at(&self, turn: u64) -> Option<&RunningShare> {
        let first = self.running.first()?.turn;
        self.running.get(turn.checked_sub(first)? as usize)
    }
}

/// Per-domain share of samples within the first `t` turns, for every `t`,
/// plus the `top_k` largest moves up and down from the initial weights.
pub fn cumulative_sampling_distribution(trace: &Trace, top_k: usize) -> Result<SamplingSummary> {
    if trace.records.is_empty() {
        return Err(Error::Report("trace has no turns".into()));
    }
    let k = trace.num_domains();
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    let mut running = Vec::with_capacity(trace.records.len());
    for r in &trace.records {
        for d in &r.sampled {
            counts[*d] += 1;
        }
        total += r.sampled.len() as u64;
        running.push(RunningShare {
            turn: r.turn,
            shares: counts.iter().map(|c| *c as f64 / total as f64).collect(),
        });
    }
    let shares = running.last().expect("nonempty").shares.clone();

    let mut changes: Vec<ShareChange> = (0..k)
        .map(|d| ShareChange {
            domain: d,
            initial: trace.initial_weights.get(d).copied().unwrap_or(0.0),
            final_share: shares[d],
        })
        .collect();
    changes.sort_by(|a, b| b.delta().total_cmp(&a.delta()).then(a.domain.cmp(&b.domain)));
    let increased = changes.iter().filter(|c| c.delta() > 0.0).take(top_k).cloned().collect();
    changes.sort_by(|a, b| a.delta().total_cmp(&b.delta()).then(a.domain.cmp(&b.domain)));
    let decreased = changes.iter().filter(|c| c.delta() < 0.0).take(top_k).cloned().collect();

    Ok(SamplingSummary {
        counts,
        shares,
        running,
        increased,
        decreased,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Best,
    Middle,
    Worst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub strategy: String,
    pub best: usize,
    pub middle: usize,
    pub worst: usize,
}

/// Per domain, the strategy with the lowest loss is "best" and the highest
/// "worst"; the rest are "middle". Exact ties take the better bucket: a tie
/// for lowest is best for all, a tie for highest is middle.
pub fn bucket_domains(per_domain_losses: &[(String, Vec<f64>)]) -> Result<(Vec<BucketCounts>, Vec<Vec<Bucket>>)> {
    if per_domain_losses.len() < 2 {
        return Err(Error::Report("bucketing needs at least two strategies".into()));
    }
    let k = per_domain_losses[0].1.len();
    if per_domain_losses.iter().any(|(_, v)| v.len() != k) {
        return Err(Error::Report("strategies report different domain sets".into()));
    }
    let mut counts: Vec<BucketCounts> = per_domain_losses
        .iter()
        .map(|(name, _)| BucketCounts {
            strategy: name.clone(),
            best: 0,
            middle: 0,
            worst: 0,
        })
        .collect();
    let mut assignment = vec![Vec::with_capacity(k); per_domain_losses.len()];
    for d in 0..k {
        let column: Vec<f64> = per_domain_losses.iter().map(|(_, v)| v[d]).collect();
        let min = column.iter().copied().fold(f64::INFINITY, f64::min);
        let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let at_max = column.iter().filter(|x| **x == max).count();
        for (s, x) in column.iter().enumerate() {
            let bucket = if *x == min {
                Bucket::Best
            } else if *x == max && at_max == 1 {
                Bucket::Worst
            } else {
                Bucket::Middle
            };
            match bucket {
                Bucket::Best => counts[s].best += 1,
                Bucket::Middle => counts[s].middle += 1,
                Bucket::Worst => counts[s].worst += 1,
            }
            assignment[s].push(bucket);
        }
    }
    Ok((counts, assignment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    JsonLines,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "jsonl" | "json-lines" => Ok(ReportFormat::JsonLines),
            other => Err(Error::Report(format!("unknown report format '{other}'"))),
        }
    }
}

/// One row per evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub turn: u64,
    pub avg_loss: f64,
    pub avg_ppl: f64,
    pub exp_avg_loss: f64,
    pub losses: Vec<f64>,
    pub perplexities: Vec<f64>,
    /// Running sampling shares at this turn, when a summary was supplied.
    pub shares: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub domains: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(domains: Vec<String>, reports: &[EvalReport], summary: Option<&SamplingSummary>) -> Result<Self> {
        let rows = reports
            .iter()
            .map(|r| {
                if r.losses.len() != domains.len() {
                    return Err(Error::Report(format!("report at turn {} has the wrong domain count", r.turn)));
                }
                let shares = match summary {
                    None => None,
                    Some(s) => Some(
                        s.running_at(r.turn)
                            .filter(|rs| rs.turn == r.turn)
                            .ok_or_else(|| Error::Report(format!("no running share for turn {}", r.turn)))?
                            .shares
                            .clone(),
                    ),
                };
                Ok(ReportRow {
                    turn: r.turn,
                    avg_loss: r.avg_loss,
                    avg_ppl: r.avg_ppl,
                    exp_avg_loss: r.exp_avg_loss(),
                    losses: r.losses.clone(),
                    perplexities: r.perplexities.clone(),
                    shares,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { domains, rows })
    }

    fn has_shares(&self) -> bool {
        self.rows.first().is_some_and(|r| r.shares.is_some())
    }

    fn columns(&self, with_shares: bool) -> Vec<String> {
        let mut cols: Vec<String> = ["turn", "avg_loss", "avg_ppl", "exp_avg_loss"].map(String::from).to_vec();
        cols.extend(self.domains.iter().map(|d| format!("loss:{d}")));
        cols.extend(self.domains.iter().map(|d| format!("ppl:{d}")));
        if with_shares {
            cols.extend(self.domains.iter().map(|d| format!("share:{d}")));
        }
        cols
    }
}

/// Reals as 17 significant digits, which read back to the same `f64`.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn schema_line() -> String {
    format!(
        "# {REPORT_SCHEMA} v{REPORT_VERSION}: losses in nats/token; avg_ppl is the mean of per-domain perplexities; \
         exp_avg_loss = exp(avg_loss); share:* is the running sampling share; bucket ties share the better bucket"
    )
}

pub fn export_report(report: &Report, path: &Path, format: ReportFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io("cannot create report", path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io("cannot write report", path, e);
    match format {
        ReportFormat::Csv => {
            writeln!(out, "{}", schema_line()).map_err(io)?;
            let shares = report.has_shares();
            let mut w = csv::Writer::from_writer(&mut out);
            let csv_err = |e: csv::Error| Error::Report(format!("{}: {e}", path.display()));
            w.write_record(report.columns(shares)).map_err(csv_err)?;
            for r in &report.rows {
                let mut rec = vec![r.turn.to_string(), format_real(r.avg_loss), format_real(r.avg_ppl), format_real(r.exp_avg_loss)];
                rec.extend(r.losses.iter().map(|x| format_real(*x)));
                rec.extend(r.perplexities.iter().map(|x| format_real(*x)));
                if let Some(s) = &r.shares {
                    rec.extend(s.iter().map(|x| format_real(*x)));
                }
                w.write_record(rec).map_err(csv_err)?;
            }
            w.flush().map_err(io)?;
        }
        ReportFormat::JsonLines => {
            let header = serde_json::json!({
                "schema": REPORT_SCHEMA,
                "version": REPORT_VERSION,
                "domains": report.domains,
                "columns": report.columns(report.has_shares()),
            });
            writeln!(out, "{header}").map_err(io)?;
            for r in &report.rows {
                serde_json::to_writer(&mut out, r).expect("rows serialize");
                writeln!(out).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

pub fn import_report(path: &Path, format: ReportFormat) -> Result<Report> {
    let file = File::open(path).map_err(|e| Error::io("cannot open report", path, e))?;
    let bad = |msg: String| Error::Report(format!("{}: {msg}", path.display()));
    match format {
        ReportFormat::Csv => {
            let mut reader = BufReader::new(file);
            let mut first = String::new();
            reader.read_line(&mut first).map_err(|e| Error::io("cannot read report", path, e))?;
            if !first.starts_with(&format!("# {REPORT_SCHEMA} v{REPORT_VERSION}:")) {
                return Err(bad("missing or unsupported schema header".into()));
            }
            let mut rdr = csv::Reader::from_reader(reader);
            let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
            let domains: Vec<String> = headers
                .iter()
                .filter_map(|h| h.strip_prefix("loss:").map(String::from))
                .collect();
            let k = domains.len();
            let shares = headers.iter().any(|h| h.starts_with("share:"));
            let expected = 4 + k * if shares { 3 } else { 2 };
            if headers.len() != expected {
                return Err(bad(format!("expected {expected} columns, found {}", headers.len())));
            }
            let mut rows = Vec::new();
            for rec in rdr.records() {
                let rec = rec.map_err(|e| bad(e.to_string()))?;
                let real = |i: usize| -> Result<f64> {
                    rec[i].parse::<f64>().map_err(|_| bad(format!("'{}' is not a number", &rec[i])))
                };
                let block = |start: usize| -> Result<Vec<f64>> { (start..start + k).map(real).collect() };
                rows.push(ReportRow {
                    turn: rec[0].parse().map_err(|_| bad(format!("bad turn '{}'", &rec[0])))?,
                    avg_loss: real(1)?,
                    avg_ppl: real(2)?,
                    exp_avg_loss: real(3)?,
                    losses: block(4)?,
                    perplexities: block(4 + k)?,
                    shares: if shares { Some(block(4 + 2 * k)?) } else { None },
                });
            }
            Ok(Report { domains, rows })
        }
        ReportFormat::JsonLines => {
            let mut lines = BufReader::new(file).lines();
            let header = lines
                .next()
                .ok_or_else(|| bad("empty file".into()))?
                .map_err(|e| Error::io("cannot read report", path, e))?;
            let header: serde_json::Value = serde_json::from_str(&header).map_err(|e| bad(e.to_string()))?;
            if header["schema"] != REPORT_SCHEMA || header["version"] != REPORT_VERSION {
                return Err(bad("missing or unsupported schema header".into()));
            }
            let domains: Vec<String> =
                serde_json::from_value(header["domains"].clone()).map_err(|e| bad(e.to_string()))?;
            let mut rows = Vec::new();
            for line in lines {
                let line = line.map_err(|e| Error::io("cannot read report", path, e))?;
                rows.push(serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?);
            }
            Ok(Report { domains, rows })
        }
    }
}
