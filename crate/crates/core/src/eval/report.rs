//! SVG line charts and a text summary computed from metric records.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{summarize, Axis, BinSummary, ComparisonRow, EvalError, MetricsRecord, BIN_COUNT, BIN_LABELS};
use crate::datagen::write_atomic;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 50.0;

/// One chart: a title, axis names, x tick labels and a y value per tick
/// (`None` leaves a gap).
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub ticks: Vec<String>,
    pub values: Vec<Option<f64>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a chart as standalone SVG. Points are joined by one polyline;
/// a chart with no values shows a "no data" placeholder instead.
pub fn svg_line_chart(c: &Chart) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, esc(&c.title));
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN / 2.0, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 10.0, esc(&c.x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(&c.y_label)
    );
    let ymax = c.values.iter().flatten().fold(1.0f64, |m, &v| m.max(v));
    let n = c.ticks.len().max(1);
    let x_at = |i: usize| x0 + (x1 - x0) * (i as f64 + 0.5) / n as f64;
    let y_at = |v: f64| y0 - (y0 - y1) * v / ymax;
    for (i, t) in c.ticks.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, x_at(i), y0 + 16.0, esc(t));
    }
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{:.2}</text>"#, x0 - 4.0, y_at(v) + 4.0, v);
    }
    let points: Vec<String> = c
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| format!("{:.2},{:.2}", x_at(i), y_at(v))))
        .collect();
    if points.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14" fill="gray">no data</text>"#, (x0 + x1) / 2.0, (y0 + y1) / 2.0);
    } else {
        let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" "));
        for p in &points {
            let (x, y) = p.split_once(',').expect("formatted as x,y");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="steelblue"/>"#);
        }
    }
    s.push_str("</svg>\n");
    s
}

type MetricFn = fn(&BinSummary) -> Option<f64>;

const METRICS: [(&str, &str, MetricFn); 4] = [
    ("cer", "mean CER", |b| b.mean_cer),
    ("ter", "mean TER", |b| b.mean_ter),
    ("ter_no_ooc", "mean TER excluding ooc", |b| b.mean_ter_no_ooc),
    ("f1_ooc", "ooc F1", |b| b.ooc.f1()),
];

fn bins_table(bins: &[BinSummary]) -> String {
    let f = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    let mut s = format!("{:<10}{:>7}{:>10}{:>10}{:>12}{:>10}\n", "bin", "count", "CER", "TER", "TER-no-ooc", "ooc F1");
    for b in bins {
        let _ = writeln!(
            s,
            "{:<10}{:>7}{:>10}{:>10}{:>12}{:>10}",
            BIN_LABELS[b.bin],
            b.count,
            f(b.mean_cer),
            f(b.mean_ter),
            f(b.mean_ter_no_ooc),
            f(b.ooc.f1())
        );
    }
    s
}

/// Writes one chart per metric against α and against β plus `summary.txt`.
/// Returns the written paths in a fixed order.
pub fn render_report(records: &[MetricsRecord], out: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out).map_err(|source| EvalError::Io { path: out.to_path_buf(), source })?;
    let mut written = Vec::new();
    let mut summary = String::new();
    for axis in [Axis::Alpha, Axis::Beta] {
        let bins = summarize(records, axis);
        for (key, label, get) in METRICS {
            let chart = Chart {
                title: format!("{label} vs {}", axis.name()),
                x_label: format!("{} bin", axis.name()),
                y_label: label.to_string(),
                ticks: BIN_LABELS.iter().map(|s| s.to_string()).collect(),
                values: bins.iter().map(|b| if b.count > 0 { get(b) } else { None }).collect(),
            };
            debug_assert_eq!(chart.values.len(), BIN_COUNT);
            let path = out.join(format!("{key}_vs_{}.svg", axis.name()));
            write_atomic(&path, svg_line_chart(&chart).as_bytes())?;
            written.push(path);
        }
        let _ = writeln!(summary, "by {}\n{}", axis.name(), bins_table(&bins));
    }
    let cers: Vec<f64> = records.iter().map(|r| r.cer).collect();
    let table = super::comparison_table(&[ComparisonRow::from_cers("all", &cers)]);
    let text = format!("samples: {}\n\nCER (%)\n{table}\n{summary}", records.len());
    let path = out.join("summary.txt");
    write_atomic(&path, text.as_bytes())?;
    written.push(path);
    Ok(written)
}
