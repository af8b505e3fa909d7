//! Metric tables and line plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "series,x,metric,value";

/// One point of a metric curve, e.g. accuracy of a run at a data fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub series: String,
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

pub fn render_table(records: &[MetricRecord]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in records {
        writeln!(out, "{},{},{},{}", r.series, r.x, r.metric, r.value).expect("writing to a String");
    }
    out
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn plot_metric(path: &Path, series: &BTreeMap<&str, Vec<(f64, f64)>>) -> Result<()> {
    let draw_err = |e: String| Error::invalid(format!("plotting {}: {e}", path.display()));
    let pts = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| draw_err(e.to_string()))?;
    for (i, pts) in series.values().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart
            .draw_series(LineSeries::new(sorted.iter().copied(), color.stroke_width(2)))
            .map_err(|e| draw_err(e.to_string()))?;
        chart
            .draw_series(sorted.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| draw_err(e.to_string()))?;
    }
    chart
        .plotting_area()
        .draw(&Rectangle::new([(x0, y0), (x1, y1)], BLACK.stroke_width(1)))
        .map_err(|e| draw_err(e.to_string()))?;
    root.present().map_err(|e| draw_err(e.to_string()))?;
    Ok(())
}

/// Writes `report.csv` and one `plot_<metric>.png` per metric (series as lines,
/// `x` on the horizontal axis). No plot is drawn for an empty record set.
pub fn emit_report(records: &[MetricRecord], out_dir: &Path) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let table = out_dir.join("report.csv");
    std::fs::write(&table, render_table(records)).map_err(|e| Error::io(&table, e))?;
    let mut by_metric: BTreeMap<&str, BTreeMap<&str, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in records {
        if r.x.is_finite() && r.value.is_finite() {
            by_metric
                .entry(&r.metric)
                .or_default()
                .entry(&r.series)
                .or_default()
                .push((r.x, r.value));
        }
    }
    let mut plots = Vec::new();
    for (metric, series) in &by_metric {
        let path = out_dir.join(format!("plot_{}.png", safe_name(metric)));
        plot_metric(&path, series)?;
        plots.push(path);
    }
    Ok(ReportFiles { table, plots })
}

/// Parses a table written by [`render_table`].
pub fn parse_table(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Parse("report table must start with its header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Parse(format!("bad report row `{l}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number `{s}`")));
            Ok(MetricRecord {
                series: f[0].into(),
                x: num(f[1])?,
                metric: f[2].into(),
                value: num(f[3])?,
            })
        })
        .collect()
}
