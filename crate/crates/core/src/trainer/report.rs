use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use crate::error::Result;
use crate::metrics::{aggregate, write_cases_csv, CaseMetrics, MetricsSummary};

/// One training iteration as recorded in `trace.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub lambda_con: f64,
    pub loss_m1: f64,
    pub loss_m2: Option<f64>,
    pub dice_l1: f64,
    pub dice_l2: Option<f64>,
    pub r1: Option<f64>,
    pub r2: Option<f64>,
}

pub fn write_trace_csv<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    #[serde(flatten)]
    pub metrics: CaseMetrics,
}

/// Deterministic part of a run's results, stored as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetricsFile {
    method: Method,
    config: TrainConfig,
    summary: MetricsSummary,
    cases: Vec<CaseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingFile {
    wall_clock_secs: f64,
    checkpoints: Vec<String>,
}

/// Everything a finished run produces besides the network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: Method,
    pub config: TrainConfig,
    pub trace: Vec<TraceRow>,
    pub cases: Vec<CaseRecord>,
    pub summary: MetricsSummary,
    pub checkpoints: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn new(config: TrainConfig, trace: Vec<TraceRow>, cases: Vec<CaseRecord>, wall_clock_secs: f64) -> Self {
        let metrics: Vec<CaseMetrics> = cases.iter().map(|c| c.metrics).collect();
        Self {
            method: config.method,
            summary: aggregate(&metrics),
            config,
            trace,
            cases,
            checkpoints: Vec::new(),
            wall_clock_secs,
        }
    }

    /// Writes `trace.csv`, `metrics.csv`, `metrics.json` and `timing.json`.
    /// Only the last one depends on anything but the configuration.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &self.trace)?;
        fs::write(dir.join("trace.csv"), &buf)?;

        let ids: Vec<String> = self.cases.iter().map(|c| c.id.clone()).collect();
        let metrics: Vec<CaseMetrics> = self.cases.iter().map(|c| c.metrics).collect();
        let mut buf = Vec::new();
        write_cases_csv(&mut buf, &ids, &metrics)?;
        fs::write(dir.join("metrics.csv"), &buf)?;

        let file = MetricsFile {
            method: self.method,
            config: self.config.clone(),
            summary: self.summary,
            cases: self.cases.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        fs::write(dir.join("metrics.json"), text)?;

        let timing = TimingFile {
            wall_clock_secs: self.wall_clock_secs,
            checkpoints: self.checkpoints.clone(),
        };
        let mut text = serde_json::to_string_pretty(&timing)?;
        text.push('\n');
        fs::write(dir.join("timing.json"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: MetricsFile = serde_json::from_str(&fs::read_to_string(dir.join("metrics.json"))?)?;
        let trace = read_trace_csv(fs::File::open(dir.join("trace.csv"))?)?;
        let timing: Option<TimingFile> = fs::read_to_string(dir.join("timing.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let (wall_clock_secs, checkpoints) = timing
            .map(|t| (t.wall_clock_secs, t.checkpoints))
            .unwrap_or((f64::NAN, Vec::new()));
        Ok(Self {
            method: file.method,
            config: file.config,
            trace,
            cases: file.cases,
            summary: file.summary,
            checkpoints,
            wall_clock_secs,
        })
    }

    pub fn mean_dice(&self) -> f64 {
        self.summary.dice.mean
    }
}
