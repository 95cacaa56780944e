//! Per-cell runs and the cross-method comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cemt_core::metrics::{mean_std, MetricsSummary};
use cemt_core::trainer::{evaluate_checkpoint, train, CaseRecord, Method, RunReport, TrainConfig};
use serde::Serialize;

use crate::dataset::LoadedDataset;
use crate::plots;
use crate::spec::ExperimentSpec;

/// One (method, split, seed) combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub method: Method,
    pub n_labeled: usize,
    pub seed: u64,
}

impl Cell {
    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join("runs")
            .join(self.method.name())
            .join(format!("split{}", self.n_labeled))
            .join(format!("seed{}", self.seed))
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} split{} seed{}", self.method, self.n_labeled, self.seed)
    }
}

pub fn cells(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut out = Vec::new();
    for &n_labeled in &spec.splits {
        for &method in &spec.methods {
            for &seed in &spec.seeds {
                out.push(Cell { method, n_labeled, seed });
            }
        }
    }
    out
}

/// Trains one cell and writes its report and checkpoints.
pub fn run_cell(
    spec: &ExperimentSpec,
    data: &LoadedDataset,
    cell: Cell,
    full_scale: bool,
    out: &Path,
) -> Result<RunReport> {
    let config = spec.train_config(cell.method, cell.seed, full_scale)?;
    let dataset = data.split(cell.n_labeled, config.seeds.split)?;
    let outcome = train(&config, &dataset, &data.test).with_context(|| format!("training {cell}"))?;
    let dir = cell.dir(out);
    let mut report = outcome.report;
    report.checkpoints = outcome.models.save_checkpoints(&dir)?;
    report.save(&dir)?;
    Ok(report)
}

/// The cached report of a cell, if it exists and was produced by `config`.
pub fn cached(cell: Cell, config: &TrainConfig, out: &Path) -> Option<RunReport> {
    let dir = cell.dir(out);
    RunReport::load(&dir).ok().filter(|r| &r.config == config)
}

/// Re-scores a cell's saved predictor on the test pool.
pub fn evaluate_cell(data: &LoadedDataset, cell: Cell, config: &TrainConfig, out: &Path) -> Result<Vec<CaseRecord>> {
    let name = if config.method.has_teacher() { "teacher.ckpt" } else { "m1.ckpt" };
    let path = cell.dir(out).join(name);
    let cases = evaluate_checkpoint(&path, &data.test, &config.inference_patch(), &config.inference_stride())
        .with_context(|| format!("evaluating {}", path.display()))?;
    Ok(cases)
}

#[derive(Debug, Serialize)]
struct TableRow {
    method: String,
    labeled: usize,
    unlabeled: usize,
    seeds: usize,
    dice_mean: f64,
    dice_std: f64,
    jaccard_mean: f64,
    jaccard_std: f64,
    asd_mean: f64,
    asd_std: f64,
    hd95_mean: f64,
    hd95_std: f64,
}

/// Loaded reports of a spec's cells, with the ones that are absent.
pub struct Comparison {
    pub reports: Vec<(Cell, RunReport)>,
    pub missing: Vec<Cell>,
}

impl Comparison {
    /// Loads every cell, training the absent ones when `run` is set.
    pub fn collect(
        spec: &ExperimentSpec,
        out: &Path,
        full_scale: bool,
        run: bool,
        mut data: impl FnMut() -> Result<LoadedDataset>,
    ) -> Result<Self> {
        let mut loaded: Option<LoadedDataset> = None;
        let mut reports = Vec::new();
        let mut missing = Vec::new();
        for cell in cells(spec) {
            let config = spec.train_config(cell.method, cell.seed, full_scale)?;
            if let Some(r) = cached(cell, &config, out) {
                reports.push((cell, r));
            } else if run {
                if loaded.is_none() {
                    loaded = Some(data()?);
                }
                eprintln!("training {cell}");
                let r = run_cell(spec, loaded.as_ref().expect("dataset loaded"), cell, full_scale, out)?;
                reports.push((cell, r));
            } else {
                missing.push(cell);
            }
        }
        Ok(Self { reports, missing })
    }

    fn rows(&self, spec: &ExperimentSpec) -> Vec<TableRow> {
        let mut rows = Vec::new();
        for &n_labeled in &spec.splits {
            for &method in &spec.methods {
                let runs: Vec<&RunReport> = self
                    .reports
                    .iter()
                    .filter(|(c, _)| c.method == method && c.n_labeled == n_labeled)
                    .map(|(_, r)| r)
                    .collect();
                if runs.is_empty() {
                    continue;
                }
                let stat = |f: fn(&MetricsSummary) -> f64| {
                    let per_seed: Vec<f64> = runs.iter().map(|r| f(&r.summary)).collect();
                    mean_std(&per_seed)
                };
                let (dice_mean, dice_std) = stat(|m| m.dice.mean);
                let (jaccard_mean, jaccard_std) = stat(|m| m.jaccard.mean);
                let (asd_mean, asd_std) = stat(|m| m.asd.mean);
                let (hd95_mean, hd95_std) = stat(|m| m.hd95.mean);
                rows.push(TableRow {
                    method: method.name().to_string(),
                    labeled: n_labeled,
                    unlabeled: spec.n_train() - n_labeled,
                    seeds: runs.len(),
                    dice_mean,
                    dice_std,
                    jaccard_mean,
                    jaccard_std,
                    asd_mean,
                    asd_std,
                    hd95_mean,
                    hd95_std,
                });
            }
        }
        rows
    }

    /// Formatted table with mean ± std over seeds, plus missing cells.
    pub fn text(&self, spec: &ExperimentSpec) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>9} {:>5} {:>16} {:>16} {:>14} {:>14}",
            "method", "lab/unlab", "seeds", "Dice[%]", "Jaccard[%]", "ASD", "95HD"
        );
        for r in self.rows(spec) {
            let _ = writeln!(
                s,
                "{:<12} {:>9} {:>5} {:>16} {:>16} {:>14} {:>14}",
                r.method,
                format!("{}/{}", r.labeled, r.unlabeled),
                r.seeds,
                format!("{:.2}±{:.2}", 100.0 * r.dice_mean, 100.0 * r.dice_std),
                format!("{:.2}±{:.2}", 100.0 * r.jaccard_mean, 100.0 * r.jaccard_std),
                format!("{:.2}±{:.2}", r.asd_mean, r.asd_std),
                format!("{:.2}±{:.2}", r.hd95_mean, r.hd95_std),
            );
        }
        if !self.missing.is_empty() {
            let _ = writeln!(s, "\nmissing cells:");
            for c in &self.missing {
                let _ = writeln!(s, "  {c}");
            }
        }
        s
    }

    pub fn csv(&self, spec: &ExperimentSpec) -> Result<Vec<u8>> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for r in self.rows(spec) {
            wtr.serialize(r)?;
        }
        Ok(wtr.into_inner()?)
    }

    /// Writes `table.csv`, `table.txt` and the SVG plots into `dir`.
    pub fn write(&self, spec: &ExperimentSpec, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = vec![dir.join("table.csv"), dir.join("table.txt")];
        fs::write(&written[0], self.csv(spec)?)?;
        fs::write(&written[1], self.text(spec))?;
        for &n_labeled in &spec.splits {
            let runs: Vec<(Cell, &RunReport)> = self
                .reports
                .iter()
                .filter(|(c, _)| c.n_labeled == n_labeled)
                .map(|(c, r)| (*c, r))
                .collect();
            if runs.is_empty() {
                continue;
            }
            let dice = dir.join(format!("dice_split{n_labeled}.svg"));
            plots::dice_over_time(&dice, n_labeled, &runs)?;
            written.push(dice);
            if runs.iter().any(|(c, _)| c.method.has_second_student()) {
                let weights = dir.join(format!("weights_split{n_labeled}.svg"));
                plots::weights_over_time(&weights, n_labeled, &runs)?;
                written.push(weights);
            }
        }
        Ok(written)
    }
}
