use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::report::{read_rows, BenchRow};
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Maps data coordinates into the plot area.
pub struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    pub fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    pub fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

/// Standalone SVG line chart; each series is drawn sorted by `x`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let f = Frame {
        x: range(pts().map(|p| p.0)),
        y: range(pts().map(|p| p.1)),
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = f.x.0 + (f.x.1 - f.x.0) * i as f64 / 4.0;
        let fy = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
        let (px, py) = (f.px(fx), f.py(fy));
        let _ = writeln!(svg, r#"<line x1="{px:.2}" y1="{y1}" x2="{px:.2}" y2="{}" stroke="black"/>"#, y1 + 5.0);
        let _ = writeln!(svg, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{fx:.3}</text>"#, y1 + 19.0);
        let _ = writeln!(svg, r#"<line x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{fy:.3}</text>"#, x0 - 8.0, py + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let mut p = s.points.clone();
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        if coords.len() > 1 {
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, coords.join(" "));
        }
        for &(x, y) in &p {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"/>"#, f.px(x), f.py(y));
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let _ = writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#, x1 + 12.0, x1 + 32.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, x1 + 38.0, ly + 4.0, escape(&s.name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn series_by_policy(rows: &[BenchRow], y: impl Fn(&BenchRow) -> f64) -> Vec<Series> {
    let mut map: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        map.entry(&r.policy).or_default().push((r.ratio.unwrap_or(r.mean_ratio), y(r)));
    }
    map.into_iter()
        .map(|(name, points)| Series {
            name: name.to_string(),
            points,
        })
        .collect()
}

/// Writes `accuracy.svg` and `wallclock.svg` under `out_dir` from a bench
/// or sweep CSV. Rows without a forced ratio are placed at their mean
/// selected ratio.
pub fn emit_plots(csv_path: &Path, out_dir: &Path) -> Result<[PathBuf; 2]> {
    let text = std::fs::read_to_string(csv_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(csv_path.to_path_buf()),
        _ => e.into(),
    })?;
    let rows = read_rows(&text)?;
    std::fs::create_dir_all(out_dir)?;
    let acc = out_dir.join("accuracy.svg");
    let wall = out_dir.join("wallclock.svg");
    std::fs::write(
        &acc,
        line_chart("Task accuracy vs cache ratio", "cache ratio", "accuracy", &series_by_policy(&rows, |r| r.accuracy)),
    )?;
    std::fs::write(
        &wall,
        line_chart(
            "Per-step latency vs cache ratio",
            "cache ratio",
            "median latency (ms)",
            &series_by_policy(&rows, |r| r.wallclock_ms),
        ),
    )?;
    Ok([acc, wall])
}
