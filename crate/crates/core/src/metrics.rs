//! Coverage, performance and robustness figures for a crawl, and their
//! mean/std aggregation over repeated runs.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::{Outcome, PageRecord};
use crate::frontier::CanonicalUrl;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no runs")]
    NoRuns,
    #[error("runs from different depth levels ({0} and {1}) cannot be aggregated together")]
    MixedDepths(u32, u32),
    #[error("unknown report format {0:?} (expected json, csv or markdown)")]
    UnknownFormat(String),
    #[error("cannot write report {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub identified: u64,
    pub downloaded: u64,
    pub failed: u64,
    pub relative_coverage: f64,
    pub failure_rate: f64,
    pub execution_time_s: f64,
    pub pages_per_minute: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl RunMetrics {
    pub fn from_counts(identified: u64, downloaded: u64, failed: u64, wall_clock: Duration) -> Self {
        let secs = wall_clock.as_secs_f64();
        Self {
            identified,
            downloaded,
            failed,
            relative_coverage: ratio(downloaded, identified),
            failure_rate: ratio(failed, identified),
            execution_time_s: secs,
            pages_per_minute: if secs > 0.0 {
                downloaded as f64 / (secs / 60.0)
            } else {
                0.0
            },
        }
    }
}

/// Metrics of one finished crawl. `identified` counts the union of URLs in
/// the manifest and URLs that were enqueued but never dequeued.
pub fn compute_run_metrics<'a>(
    manifest: &'a [PageRecord],
    enqueued: impl IntoIterator<Item = &'a CanonicalUrl>,
    wall_clock: Duration,
) -> RunMetrics {
    let mut identified: HashSet<&CanonicalUrl> = manifest.iter().map(|r| &r.url).collect();
    identified.extend(enqueued);
    let count = |o: Outcome| manifest.iter().filter(|r| r.outcome == o).count() as u64;
    RunMetrics::from_counts(
        identified.len() as u64,
        count(Outcome::Downloaded),
        count(Outcome::Failed),
        wall_clock,
    )
}

/// A run tagged with the depth bound it was crawled at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledRun {
    pub depth: u32,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        // Guard against -0.0 and rounding noise on constant input.
        let std = if values.iter().all(|v| *v == values[0]) { 0.0 } else { var.sqrt() };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricStats {
    pub identified: Stat,
    pub downloaded: Stat,
    pub failed: Stat,
    pub relative_coverage: Stat,
    pub failure_rate: Stat,
    pub execution_time_s: Stat,
    pub pages_per_minute: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthAggregate {
    pub depth: u32,
    pub runs: usize,
    pub metrics: MetricStats,
    #[serde(skip)]
    pub run_metrics: Vec<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateReport {
    pub depth_levels: Vec<DepthAggregate>,
}

impl AggregateReport {
    pub fn run_count(&self) -> usize {
        self.depth_levels.iter().map(|d| d.runs).sum()
    }
}

/// Field-wise mean and population std over runs of one depth level. Rates
/// are averaged per run (mean of ratios).
pub fn aggregate_runs(runs: &[LabeledRun]) -> Result<DepthAggregate, MetricsError> {
    let first = runs.first().ok_or(MetricsError::NoRuns)?;
    if let Some(other) = runs.iter().find(|r| r.depth != first.depth) {
        return Err(MetricsError::MixedDepths(first.depth, other.depth));
    }
    let col = |f: fn(&RunMetrics) -> f64| Stat::of(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    Ok(DepthAggregate {
        depth: first.depth,
        runs: runs.len(),
        metrics: MetricStats {
            identified: col(|m| m.identified as f64),
            downloaded: col(|m| m.downloaded as f64),
            failed: col(|m| m.failed as f64),
            relative_coverage: col(|m| m.relative_coverage),
            failure_rate: col(|m| m.failure_rate),
            execution_time_s: col(|m| m.execution_time_s),
            pages_per_minute: col(|m| m.pages_per_minute),
        },
        run_metrics: runs.iter().map(|r| r.metrics).collect(),
    })
}

/// Group runs by depth and aggregate each group, shallowest first.
pub fn build_report(runs: &[LabeledRun]) -> Result<AggregateReport, MetricsError> {
    let mut by_depth: BTreeMap<u32, Vec<LabeledRun>> = BTreeMap::new();
    for run in runs {
        by_depth.entry(run.depth).or_default().push(*run);
    }
    let depth_levels = by_depth
        .values()
        .map(|group| aggregate_runs(group))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AggregateReport { depth_levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" | "markdown-table" => Ok(Self::Markdown),
            _ => Err(MetricsError::UnknownFormat(s.to_string())),
        }
    }
}

pub const CSV_HEADER: &str =
    "depth,run,identified,downloaded,failed,relative_coverage,failure_rate,execution_time_s,pages_per_minute";

pub fn render_report(report: &AggregateReport, format: ReportFormat) -> Result<String, MetricsError> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report).expect("report serializes")),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => Ok(render_markdown(report)),
    }
}

fn render_csv(report: &AggregateReport) -> Result<String, MetricsError> {
    if report.depth_levels.iter().all(|d| d.run_metrics.is_empty()) {
        return Err(MetricsError::NoRuns);
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for level in &report.depth_levels {
        for (i, m) in level.run_metrics.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                level.depth,
                i + 1,
                m.identified,
                m.downloaded,
                m.failed,
                m.relative_coverage,
                m.failure_rate,
                m.execution_time_s,
                m.pages_per_minute
            );
        }
    }
    Ok(out)
}

fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

/// One section per depth level with a mean row and a std row, in the same
/// column order as the coverage and failure tables: identified, success,
/// rate, failed, failure rate, then time and throughput.
fn render_markdown(report: &AggregateReport) -> String {
    let mut out = String::new();
    out.push_str("| | identified | success | rate | failed | failure rate | time (s) | pages/min |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for level in &report.depth_levels {
        let _ = writeln!(out, "| **DEPTH {}** ({} runs) | | | | | | | |", level.depth, level.runs);
        let m = &level.metrics;
        for (label, pick) in [("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64), ("std", |s: &Stat| s.std)] {
            let _ = writeln!(
                out,
                "| {label} | {} | {} | {} | {} | {} | {} | {} |",
                num(pick(&m.identified)),
                num(pick(&m.downloaded)),
                num(pick(&m.relative_coverage)),
                num(pick(&m.failed)),
                num(pick(&m.failure_rate)),
                num(pick(&m.execution_time_s)),
                num(pick(&m.pages_per_minute)),
            );
        }
    }
    out
}

pub fn emit_report(report: &AggregateReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let text = render_report(report, format)?;
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}
