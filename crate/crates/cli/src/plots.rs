//! SVG line plots of training traces.

use std::path::Path;

use anyhow::{anyhow, Result};
use cemt_core::trainer::{Method, RunReport, TraceRow};
use plotters::prelude::*;

use crate::runs::Cell;

const SIZE: (u32, u32) = (800, 480);
const SMOOTH: usize = 25;
const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Seed-averaged series of `f` over steps, followed by a trailing moving
/// average. Steps where `f` is `None` for every seed are skipped.
fn series(runs: &[&RunReport], f: impl Fn(&TraceRow) -> Option<f64>) -> Vec<(f64, f64)> {
    let len = runs.iter().map(|r| r.trace.len()).min().unwrap_or(0);
    let raw: Vec<(f64, f64)> = (0..len)
        .filter_map(|i| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| f(&r.trace[i])).collect();
            (!vals.is_empty()).then(|| (runs[0].trace[i].step as f64, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    (0..raw.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(SMOOTH);
            let window = &raw[lo..=i];
            (raw[i].0, window.iter().map(|p| p.1).sum::<f64>() / window.len() as f64)
        })
        .collect()
}

fn by_method<'a>(runs: &[(Cell, &'a RunReport)]) -> Vec<(Method, Vec<&'a RunReport>)> {
    let mut out: Vec<(Method, Vec<&RunReport>)> = Vec::new();
    for (c, r) in runs {
        match out.iter_mut().find(|(m, _)| *m == c.method) {
            Some((_, v)) => v.push(r),
            None => out.push((c.method, vec![r])),
        }
    }
    out
}

fn draw(path: &Path, title: &str, y_label: &str, lines: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let x_max = lines
        .iter()
        .flat_map(|(_, s)| s.iter().map(|p| p.0))
        .fold(1.0_f64, f64::max);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..x_max, 0.0..1.0)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc(y_label)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    for (i, (name, points)) in lines.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

/// Training-batch Dice of the first student, one line per method.
pub fn dice_over_time(path: &Path, n_labeled: usize, runs: &[(Cell, &RunReport)]) -> Result<()> {
    let lines: Vec<(String, Vec<(f64, f64)>)> = by_method(runs)
        .into_iter()
        .map(|(m, rs)| (m.name().to_string(), series(&rs, |t| Some(1.0 - t.dice_l1))))
        .collect();
    draw(path, &format!("batch Dice, {n_labeled} labeled"), "Dice", &lines)
}

/// Competition weights `r1` and `r2` of the methods that have them.
pub fn weights_over_time(path: &Path, n_labeled: usize, runs: &[(Cell, &RunReport)]) -> Result<()> {
    let mut lines = Vec::new();
    for (m, rs) in by_method(runs) {
        if !m.has_second_student() {
            continue;
        }
        lines.push((format!("{m} r1"), series(&rs, |t| t.r1)));
        lines.push((format!("{m} r2"), series(&rs, |t| t.r2)));
    }
    draw(path, &format!("competition weights, {n_labeled} labeled"), "weight", &lines)
}
