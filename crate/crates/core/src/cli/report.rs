//! Plain-text summaries and SVG charts from a run's metrics CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cli::experiment::read_metrics_csv;
use crate::error::{Error, Result};

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Final-value table plus one curve chart per metric (and a bar chart for
/// final KL values when present). Returns the rendered text table.
pub fn emit_report(run_dir: &Path) -> Result<String> {
    let rows = read_metrics_csv(run_dir)?;
    if rows.is_empty() {
        return Err(Error::Malformed("metrics.csv has no rows".into()));
    }

    // (metric -> mode -> series sorted by epoch)
    let mut series: BTreeMap<String, BTreeMap<String, Vec<(u64, f64)>>> = BTreeMap::new();
    for row in &rows {
        series
            .entry(row.metric.clone())
            .or_default()
            .entry(row.mode.clone())
            .or_default()
            .push((row.epoch, row.mean));
    }
    for modes in series.values_mut() {
        for points in modes.values_mut() {
            points.sort_by_key(|(e, _)| *e);
        }
    }

    let mut table = String::new();
    writeln!(table, "{:<12} {:<16} {:>8} {:>14}", "mode", "metric", "epoch", "final").unwrap();
    for (metric, modes) in &series {
        for (mode, points) in modes {
            let (epoch, value) = *points.last().unwrap();
            writeln!(table, "{mode:<12} {metric:<16} {epoch:>8} {value:>14.6}").unwrap();
        }
    }
    fs::write(run_dir.join("report.txt"), &table)?;
    print!("{table}");

    for (metric, modes) in &series {
        let svg = line_chart(metric, modes);
        fs::write(run_dir.join(format!("metric_{metric}.svg")), svg)?;
    }
    if let Some(modes) = series.get("kl") {
        let finals: Vec<(String, f64)> = modes
            .iter()
            .map(|(mode, points)| (mode.clone(), points.last().unwrap().1))
            .collect();
        fs::write(run_dir.join("kl_final.svg"), bar_chart("final kl", &finals))?;
    }
    Ok(table)
}

fn axis_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.08;
    (lo - pad, hi + pad)
}

fn line_chart(metric: &str, modes: &BTreeMap<String, Vec<(u64, f64)>>) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 30.0, 50.0);
    let (x_lo, x_hi) = axis_bounds(
        modes
            .values()
            .flat_map(|pts| pts.iter().map(|(e, _)| *e as f64)),
    );
    let (y_lo, y_hi) = axis_bounds(modes.values().flat_map(|pts| pts.iter().map(|(_, v)| *v)));
    let sx = |x: f64| left + (x - x_lo) / (x_hi - x_lo) * (width - left - right);
    let sy = |y: f64| height - bottom - (y - y_lo) / (y_hi - y_lo) * (height - top - bottom);

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )
    .unwrap();
    writeln!(svg, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>").unwrap();
    writeln!(
        svg,
        "<text x=\"{}\" y=\"20\" font-family=\"monospace\" font-size=\"14\">{metric} vs epoch</text>",
        left
    )
    .unwrap();
    // Axes.
    writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        height - bottom,
        width - right,
        height - bottom
    )
    .unwrap();
    writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>",
        height - bottom
    )
    .unwrap();
    for (label, x, y, anchor) in [
        (format!("{x_lo:.0}"), sx(x_lo), height - bottom + 18.0, "middle"),
        (format!("{x_hi:.0}"), sx(x_hi), height - bottom + 18.0, "middle"),
        (format!("{y_lo:.3}"), left - 6.0, sy(y_lo) + 4.0, "end"),
        (format!("{y_hi:.3}"), left - 6.0, sy(y_hi) + 4.0, "end"),
    ] {
        writeln!(
            svg,
            "<text x=\"{x}\" y=\"{y}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"{anchor}\">{label}</text>"
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">epoch</text>",
        (left + width - right) / 2.0,
        height - 12.0
    )
    .unwrap();

    for (i, (mode, points)) in modes.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .map(|(e, v)| format!("{:.2},{:.2}", sx(*e as f64), sy(*v)))
            .collect();
        writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            path.join(" ")
        )
        .unwrap();
        for (e, v) in points {
            writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.2\" fill=\"{color}\"/>",
                sx(*e as f64),
                sy(*v)
            )
            .unwrap();
        }
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{mode}</text>",
            width - right - 90.0,
            top + 16.0 * (i + 1) as f64
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn bar_chart(title: &str, finals: &[(String, f64)]) -> String {
    let (width, height) = (420.0, 320.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let y_hi = finals.iter().map(|(_, v)| *v).fold(0.0f64, f64::max) * 1.15 + 1e-9;
    let sy = |y: f64| height - bottom - y / y_hi * (height - top - bottom);
    let slot = (width - left - right) / finals.len() as f64;

    let mut svg = String::new();
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )
    .unwrap();
    writeln!(svg, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>").unwrap();
    writeln!(
        svg,
        "<text x=\"{left}\" y=\"22\" font-family=\"monospace\" font-size=\"14\">{title}</text>"
    )
    .unwrap();
    writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        height - bottom,
        width - right,
        height - bottom
    )
    .unwrap();
    writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>",
        height - bottom
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{y_hi:.3}</text>",
        left - 6.0,
        sy(y_hi) + 4.0
    )
    .unwrap();
    for (i, (mode, value)) in finals.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x = left + slot * i as f64 + slot * 0.2;
        let w = slot * 0.6;
        let y = sy(*value);
        writeln!(
            svg,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{:.2}\" fill=\"{color}\"/>",
            height - bottom - y
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{mode}</text>",
            x + w / 2.0,
            height - bottom + 18.0
        )
        .unwrap();
        writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{value:.3}</text>",
            x + w / 2.0,
            y - 6.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
