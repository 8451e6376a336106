//! Run reports and their CSV / table renderings.
//!
//! Floats are written with Rust's shortest round-trip formatting so that
//! re-parsing a CSV row yields the exact values the aggregates were computed from.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::currency::Cents;
use crate::kernel::SimTime;

pub const CSV_HEADER: &str = "id,submit_s,start_s,finish_s,turnaround_s,provider";

/// One finished cloudlet / task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub id: u64,
    pub submit: SimTime,
    pub start: SimTime,
    pub finish: SimTime,
    pub provider: String,
}

impl TaskRow {
    pub fn turnaround(&self) -> f64 {
        self.finish - self.submit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub avg_turnaround_s: f64,
    pub makespan_s: f64,
    pub total_cost: Cents,
}

impl Aggregates {
    /// Mean turnaround and `max(finish) - min(submit)`; both zero for no rows.
    pub fn from_rows(rows: &[TaskRow], total_cost: Cents) -> Self {
        if rows.is_empty() {
            return Aggregates { avg_turnaround_s: 0.0, makespan_s: 0.0, total_cost };
        }
        let sum: f64 = rows.iter().map(TaskRow::turnaround).sum();
        let first_submit = rows.iter().map(|r| r.submit).min().expect("non-empty");
        let last_finish = rows.iter().map(|r| r.finish).max().expect("non-empty");
        Aggregates { avg_turnaround_s: sum / rows.len() as f64, makespan_s: last_finish - first_submit, total_cost }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub scenario_hash: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    Federation { enabled: bool },
    Burst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: ExperimentKind,
    pub rows: Vec<TaskRow>,
    pub aggregates: Aggregates,
    pub metadata: RunMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Table,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "table" => Ok(Format::Table),
            other => Err(format!("unknown format '{other}', expected csv or table")),
        }
    }
}

pub fn emit(report: &RunReport, format: Format) -> Vec<u8> {
    match format {
        Format::Csv => emit_csv(report),
        Format::Table => emit_table(report),
    }
    .into_bytes()
}

fn emit_csv(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        writeln!(out, "{},{},{},{},{},{}", r.id, r.submit, r.start, r.finish, r.turnaround(), r.provider).unwrap();
    }
    let a = &report.aggregates;
    let m = &report.metadata;
    writeln!(out, "# avg_turnaround_s={}", a.avg_turnaround_s).unwrap();
    writeln!(out, "# makespan_s={}", a.makespan_s).unwrap();
    writeln!(out, "# total_cost={}", a.total_cost).unwrap();
    writeln!(out, "# seed={}", m.seed).unwrap();
    writeln!(out, "# scenario_hash={}", m.scenario_hash).unwrap();
    writeln!(out, "# tool_version={}", m.tool_version).unwrap();
    out
}

fn emit_table(report: &RunReport) -> String {
    let a = &report.aggregates;
    let mut out = String::new();
    match report.kind {
        ExperimentKind::Federation { enabled } => {
            let column = if enabled { "With Federation" } else { "Without Federation" };
            writeln!(out, "{:<34}{:>20}", "Performance Metrics", column).unwrap();
            writeln!(out, "{:<34}{:>20.2}", "Average Turn Around Time (Secs)", a.avg_turnaround_s).unwrap();
            writeln!(out, "{:<34}{:>20.2}", "Makespan (Secs)", a.makespan_s).unwrap();
        }
        ExperimentKind::Burst => {
            writeln!(out, "{:<34}{:>20}", "Metric", "Value").unwrap();
            writeln!(out, "{:<34}{:>20.2}", "Makespan (s)", a.makespan_s).unwrap();
            writeln!(out, "{:<34}{:>20}", "Cloud Cost (US$)", a.total_cost.to_string()).unwrap();
        }
    }
    writeln!(out, "{:<34}{:>20}", "Tasks", report.rows.len()).unwrap();
    out
}

/// One line of a fraction sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub makespan_s: f64,
    pub cost: Cents,
}

pub fn emit_sweep(rows: &[SweepRow], format: Format) -> Vec<u8> {
    let mut out = String::new();
    match format {
        Format::Csv => {
            out.push_str("fraction,makespan_s,cost\n");
            for r in rows {
                writeln!(out, "{},{},{}", r.fraction, r.makespan_s, r.cost).unwrap();
            }
        }
        Format::Table => {
            writeln!(out, "{:<16}{:>16}{:>20}", "", "Makespan (s)", "Cloud Cost (US$)").unwrap();
            for r in rows {
                let label =
                    if r.fraction == 0.0 { "Private only".to_string() } else { format!("Public {}%", (r.fraction * 100.0).round() as i64) };
                writeln!(out, "{:<16}{:>16.2}{:>20}", label, r.makespan_s, r.cost.to_string()).unwrap();
            }
        }
    }
    out.into_bytes()
}
