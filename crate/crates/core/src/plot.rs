//! SVG training curves.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::train::TrainLogRow;

const WIDTH: f64 = 640.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 50.0;

struct Series<'a> {
    label: &'a str,
    colour: &'a str,
    values: Vec<f64>,
}

fn polyline(out: &mut String, s: &Series<'_>, epochs: &[f64], x_range: (f64, f64), y_range: (f64, f64), top: f64) {
    let sx = |e: f64| MARGIN + (e - x_range.0) / (x_range.1 - x_range.0).max(1e-12) * (WIDTH - 2.0 * MARGIN);
    let sy = |v: f64| top + PANEL_H - (v - y_range.0) / (y_range.1 - y_range.0).max(1e-12) * PANEL_H;
    let pts: Vec<String> = epochs
        .iter()
        .zip(&s.values)
        .map(|(&e, &v)| format!("{:.2},{:.2}", sx(e), sy(v)))
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
        s.colour,
        pts.join(" "),
        s.label
    );
}

fn range(series: &[Series<'_>]) -> (f64, f64) {
    let (lo, hi) = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn panel(out: &mut String, title: &str, series: &[Series<'_>], epochs: &[f64], y_range: (f64, f64), top: f64) {
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{top}" width="{}" height="{PANEL_H}" fill="none" stroke="#999"/>"##,
        WIDTH - 2.0 * MARGIN
    );
    let _ = writeln!(out, r#"<text x="{MARGIN}" y="{}" font-size="12">{title}</text>"#, top - 6.0);
    let x_range = (epochs[0], *epochs.last().unwrap());
    for (k, s) in series.iter().enumerate() {
        polyline(out, s, epochs, x_range, y_range, top);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" fill="{}">{}</text>"#,
            WIDTH - MARGIN - 90.0,
            top + 14.0 + 13.0 * k as f64,
            s.colour,
            s.label
        );
    }
}

/// Losses (log10 scale) and task weights against epoch.
pub fn training_curves_svg(log: &[TrainLogRow]) -> Result<String> {
    if log.is_empty() {
        return Err(Error::Data("training log has no rows".into()));
    }
    let epochs: Vec<f64> = log.iter().map(|r| r.epoch as f64).collect();
    let log10 = |v: f64| v.max(1e-12).log10();
    let losses = [
        Series {
            label: "l_fusion",
            colour: "#1f77b4",
            values: log.iter().map(|r| log10(r.l_fusion)).collect(),
        },
        Series {
            label: "l_count",
            colour: "#d62728",
            values: log.iter().map(|r| log10(r.l_count)).collect(),
        },
        Series {
            label: "l_total",
            colour: "#2ca02c",
            values: log.iter().map(|r| log10(r.l_total)).collect(),
        },
    ];
    let weights = [
        Series {
            label: "lambda1",
            colour: "#1f77b4",
            values: log.iter().map(|r| r.lambda1).collect(),
        },
        Series {
            label: "lambda2",
            colour: "#d62728",
            values: log.iter().map(|r| r.lambda2).collect(),
        },
    ];
    let height = 2.0 * PANEL_H + 3.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    panel(&mut out, "log10 loss vs epoch", &losses, &epochs, range(&losses), MARGIN);
    panel(&mut out, "task weights vs epoch", &weights, &epochs, range(&weights), 2.0 * MARGIN + PANEL_H);
    out.push_str("</svg>\n");
    Ok(out)
}
