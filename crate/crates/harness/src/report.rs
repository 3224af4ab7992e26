//! Run summaries and SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::Result;
use crate::metrics::{MetricsRow, THRESHOLDS};
use crate::trainer::EpochDiagnostics;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.to_string(),
            points,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// A line chart with one polyline per series, axis extremes and a legend.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="{}" text-anchor="middle">{x0}</text>"#,
        bottom + 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{right}" y="{}" text-anchor="middle">{x1}</text>"#,
        bottom + 16.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        bottom + 34.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{bottom}" text-anchor="end">{y0:.4}</text>"#,
        left - 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end">{y1:.4}</text>"#,
        left - 4.0,
        top + 4.0
    );

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            right - 110.0,
            right - 94.0,
            right - 90.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn by_epoch(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> f64) -> Vec<(f64, f64)> {
    rows.iter().map(|r| (r.epoch as f64, f(r))).collect()
}

/// `(file name, svg)` for the loss, pseudo-label accuracy and final
/// precision/recall charts.
pub fn charts(rows: &[MetricsRow]) -> Vec<(&'static str, String)> {
    let loss = line_chart(
        "Training loss",
        "epoch",
        &[
            Series::new("total", by_epoch(rows, |r| r.loss_total)),
            Series::new("augmentation", by_epoch(rows, |r| r.loss_augm)),
            Series::new("semantic", by_epoch(rows, |r| r.loss_sempos)),
        ],
    );
    let pl = line_chart(
        "Pseudo-label accuracy",
        "epoch",
        &[Series::new("accuracy", by_epoch(rows, |r| r.pl_accuracy))],
    );
    let thresholds =
        |v: &[f64; THRESHOLDS]| v.iter().enumerate().map(|(t, &p)| (t as f64, p)).collect();
    let pr = match rows.last() {
        Some(last) => line_chart(
            &format!("Precision and recall at epoch {}", last.epoch),
            "voting threshold",
            &[
                Series::new("precision", thresholds(&last.precision)),
                Series::new("recall", thresholds(&last.recall)),
            ],
        ),
        None => line_chart("Precision and recall", "voting threshold", &[]),
    };
    vec![
        ("loss.svg", loss),
        ("pl_accuracy.svg", pl),
        ("precision_recall.svg", pr),
    ]
}

/// Headline numbers of a run as JSON.
pub fn summary(
    rows: &[MetricsRow],
    diagnostics: &[EpochDiagnostics],
    config_toml: Option<&str>,
) -> Value {
    let first = rows.first();
    let last = rows.last();
    let (correct, total) = diagnostics.iter().fold((0u64, 0u64), |(c, t), d| {
        (c + d.semantic_label_correct, t + d.semantic_label_total)
    });
    json!({
        "epochs": rows.len(),
        "final": last.map(|r| json!({
            "epoch": r.epoch,
            "lr": r.lr,
            "loss_total": r.loss_total,
            "pl_accuracy": r.pl_accuracy,
            "precision": r.precision.to_vec(),
            "recall": r.recall.to_vec(),
            "probe_linear": r.probe_linear,
            "probe_knn": r.probe_knn,
        })),
        "first_epoch_pl_accuracy": first.map(|r| r.pl_accuracy),
        "total_fallbacks": rows.iter().map(|r| r.fallbacks).sum::<usize>(),
        "semantic_label_accuracy": if total == 0 { None } else { Some(correct as f64 / total as f64) },
        "labeled_seen": diagnostics.iter().map(|d| d.labeled_seen).sum::<u64>(),
        "enqueued": diagnostics.iter().map(|d| d.enqueued).sum::<u64>(),
        "view_digest": diagnostics.last().map(|d| format!("{:016x}", d.view_digest)),
        "config": config_toml,
    })
}

/// Writes `summary.json` and, if asked, the SVG charts into `dir`.
pub fn write_report(
    dir: &Path,
    rows: &[MetricsRow],
    diagnostics: &[EpochDiagnostics],
    config_toml: Option<&str>,
    with_charts: bool,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(&summary(rows, diagnostics, config_toml))
        .expect("summary serializes");
    std::fs::write(dir.join("summary.json"), text + "\n")?;
    if with_charts {
        for (name, svg) in charts(rows) {
            std::fs::write(dir.join(name), svg)?;
        }
    }
    Ok(())
}
