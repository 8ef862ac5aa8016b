//! Static SVG line charts of the metrics CSV: one panel per column, one line
//! per split.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use cleft_core::training::MetricRow;

const PANEL_W: f64 = 560.0;
const PANEL_H: f64 = 160.0;
const MARGIN: f64 = 48.0;
const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

type Column = (&'static str, fn(&MetricRow) -> Option<f64>);

const COLUMNS: [Column; 4] = [
    ("loss", |r| Some(r.loss)),
    ("lr", |r| Some(r.lr)),
    ("tau", |r| Some(r.tau)),
    ("acc", |r| r.acc),
];

fn polyline(points: &[(f64, f64)], (x0, x1): (f64, f64), (y0, y1): (f64, f64), top: f64) -> String {
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * (PANEL_W - 2.0 * MARGIN);
    let sy = |y: f64| top + PANEL_H - 24.0 - (y - y0) / (y1 - y0).max(f64::MIN_POSITIVE) * (PANEL_H - 48.0);
    points
        .iter()
        .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders `rows` as stacked panels. Rows with non-finite values are skipped.
pub fn metrics_svg(rows: &[MetricRow]) -> Result<String> {
    if rows.is_empty() {
        bail!(cleft_core::Error::Config("metrics file has no rows to plot".into()));
    }
    let mut splits: Vec<&str> = rows.iter().map(|r| r.split.as_str()).collect();
    splits.sort_unstable();
    splits.dedup();
    let x_range = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r.step as f64), hi.max(r.step as f64))
    });
    let height = PANEL_H * COLUMNS.len() as f64;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" font-family="sans-serif" font-size="11">"#
    )?;
    for (p, (name, get)) in COLUMNS.iter().enumerate() {
        let top = p as f64 * PANEL_H;
        let vals: Vec<f64> = rows.iter().filter_map(get).filter(|v| v.is_finite()).collect();
        let (lo, hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        writeln!(svg, r#"<text x="{MARGIN}" y="{:.1}" font-weight="bold">{name}</text>"#, top + 16.0)?;
        writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#999"/>"##,
            top + 24.0,
            PANEL_W - 2.0 * MARGIN,
            PANEL_H - 48.0
        )?;
        if vals.is_empty() {
            continue;
        }
        writeln!(svg, r#"<text x="4" y="{:.1}">{hi:.3e}</text>"#, top + 30.0)?;
        writeln!(svg, r#"<text x="4" y="{:.1}">{lo:.3e}</text>"#, top + PANEL_H - 24.0)?;
        for (k, split) in splits.iter().enumerate() {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.split == *split)
                .filter_map(|r| get(r).filter(|v| v.is_finite()).map(|v| (r.step as f64, v)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let colour = COLOURS[k % COLOURS.len()];
            writeln!(
                svg,
                r#"<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{}"/>"#,
                polyline(&pts, x_range, (lo, hi), top)
            )?;
            writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" fill="{colour}">{split}</text>"#,
                PANEL_W - MARGIN - 80.0 + 0.0,
                top + 16.0 + 12.0 * k as f64
            )?;
        }
    }
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}">step {:.0} to {:.0}</text>"#,
        PANEL_W / 2.0 - 40.0,
        height - 6.0,
        x_range.0,
        x_range.1
    )?;
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, split: &str, loss: f64) -> MetricRow {
        MetricRow {
            step,
            split: split.into(),
            loss,
            lr: 1e-3,
            tau: 0.07,
            acc: Some(0.5),
        }
    }

    #[test]
    fn renders_one_line_per_split_and_panel() {
        let rows = vec![row(1, "train", 2.0), row(2, "train", 1.0), row(2, "val", 1.5), row(2, "test_zs", f64::NAN)];
        let svg = metrics_svg(&rows).unwrap();
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2 + 3 + 3 + 3);
        assert!(!svg.contains("NaN"));
        assert_eq!(svg, metrics_svg(&rows).unwrap());
        assert!(metrics_svg(&[]).is_err());
    }
}
