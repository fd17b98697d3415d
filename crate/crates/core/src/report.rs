//! Run artifacts: per-round results, run summaries, the rolling-gain and
//! peak metrics, multi-run aggregation, and the JSONL/CSV writers the CLI
//! exposes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::OperationalCounters;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("curve too short: rolling gain needs at least 20 rounds, got {0}")]
    CurveTooShort(usize),
    #[error("empty curve")]
    EmptyCurve,
    #[error("incomplete run: {0}")]
    IncompleteRun(String),
    #[error("io error: {0}")]
    Io(String),
}

/// One JSON line per round in the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: u32,
    pub eval_pass1: f64,
    pub train_pass1: f64,
    pub skills_born: u32,
    pub skills_retired: u32,
    pub active_count: u32,
    pub router_engagement: f64,
    pub rollback_fired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub baseline: f64,
    pub peak: f64,
    pub rolling_gain: Option<f64>,
    pub final_active: u64,
    pub rollbacks: u32,
    pub counters: OperationalCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub rounds: Vec<RoundResult>,
    pub summary: RunSummary,
}

/// mean(last 10 rounds) − mean(first 10 rounds).
pub fn rolling_gain(curve: &[f64]) -> Result<f64, ReportError> {
    if curve.len() < 20 {
        return Err(ReportError::CurveTooShort(curve.len()));
    }
    let head: f64 = curve[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = curve[curve.len() - 10..].iter().sum::<f64>() / 10.0;
    Ok(tail - head)
}

/// Maximum of the curve.
pub fn peak(curve: &[f64]) -> Result<f64, ReportError> {
    if curve.is_empty() {
        return Err(ReportError::EmptyCurve);
    }
    Ok(curve.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1); None for fewer than two values.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64;
    Some(var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

fn mean_std(values: &[f64]) -> MeanStd {
    MeanStd { mean: mean(values), std: std_dev(values) }
}

/// Cross-seed aggregate in the shape of the results table: baseline, peak,
/// rolling gain, each mean ± std.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub baseline: MeanStd,
    pub peak: MeanStd,
    pub rolling_gain: MeanStd,
    pub per_run: Vec<RunSummary>,
}

pub fn aggregate(reports: &[RunReport]) -> Result<Aggregate, ReportError> {
    if reports.is_empty() {
        return Err(ReportError::IncompleteRun("no runs to aggregate".to_string()));
    }
    let rounds = reports[0].rounds.len();
    for r in reports {
        if r.rounds.len() != rounds {
            return Err(ReportError::IncompleteRun(format!(
                "run for seed {} has {} rounds, expected {rounds}",
                r.seed,
                r.rounds.len()
            )));
        }
    }
    let baselines: Vec<f64> = reports.iter().map(|r| r.summary.baseline).collect();
    let peaks: Vec<f64> = reports.iter().map(|r| r.summary.peak).collect();
    let gains: Vec<f64> = reports.iter().filter_map(|r| r.summary.rolling_gain).collect();
    Ok(Aggregate {
        runs: reports.len(),
        baseline: mean_std(&baselines),
        peak: mean_std(&peaks),
        rolling_gain: mean_std(&gains),
        per_run: reports.iter().map(|r| r.summary.clone()).collect(),
    })
}

pub fn write_rounds_jsonl(report: &RunReport, out: &mut dyn Write) -> Result<(), ReportError> {
    for round in &report.rounds {
        let line = serde_json::to_string(round).expect("round result serializes");
        writeln!(out, "{line}").map_err(|e| ReportError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Curve CSV: one row per round per seed, with cumulative born/retired so
/// learning curves can be replotted externally.
pub fn write_curves_csv(reports: &[RunReport], out: &mut dyn Write) -> Result<(), ReportError> {
    writeln!(out, "round,seed,eval_pass1,train_pass1,active,born_cum,retired_cum")
        .map_err(|e| ReportError::Io(e.to_string()))?;
    for report in reports {
        let mut born_cum = 0u64;
        let mut retired_cum = 0u64;
        for r in &report.rounds {
            born_cum += u64::from(r.skills_born);
            retired_cum += u64::from(r.skills_retired);
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.round, report.seed, r.eval_pass1, r.train_pass1, r.active_count, born_cum, retired_cum
            )
            .map_err(|e| ReportError::Io(e.to_string()))?;
        }
    }
    Ok(())
}

/// Load a run directory written by the CLI (`summary.json` + `rounds.jsonl`).
pub fn load_run_dir(dir: &Path) -> Result<RunReport, ReportError> {
    let summary_text = std::fs::read_to_string(dir.join("summary.json"))
        .map_err(|e| ReportError::IncompleteRun(format!("{}: {e}", dir.display())))?;
    let summary: RunSummary = serde_json::from_str(&summary_text)
        .map_err(|e| ReportError::IncompleteRun(format!("{}: {e}", dir.display())))?;
    let rounds_text = std::fs::read_to_string(dir.join("rounds.jsonl"))
        .map_err(|e| ReportError::IncompleteRun(format!("{}: {e}", dir.display())))?;
    let mut rounds = Vec::new();
    for line in rounds_text.lines().filter(|l| !l.trim().is_empty()) {
        let r: RoundResult = serde_json::from_str(line)
            .map_err(|e| ReportError::IncompleteRun(format!("{}: {e}", dir.display())))?;
        rounds.push(r);
    }
    if rounds.is_empty() {
        return Err(ReportError::IncompleteRun(format!("{}: no rounds", dir.display())));
    }
    Ok(RunReport { seed: summary.seed, rounds, summary })
}
