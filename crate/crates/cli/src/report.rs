//! Report files: JSON, a flat CSV with one row per metric value, and SVG
//! line charts of each metric against context length.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ctxssl_core::eval::{EvalReport, FlatRow};
use ctxssl_core::MaskMatrix;

use crate::error::{CliError, Result};

pub fn write_json(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, json).map_err(|e| CliError::io(path, e))
}

pub fn read_json(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))
}

/// Flat rows plus the encoder classification score.
pub fn all_rows(report: &EvalReport) -> Vec<FlatRow> {
    let mut rows = vec![FlatRow {
        group: "encoder".into(),
        mode: "none".into(),
        length: 0,
        metric: "classification_top1".into(),
        value: report.classification_top1,
    }];
    rows.extend(report.flat_rows());
    rows
}

pub fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| CliError::Other(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["group", "mode", "length", "metric", "value"])
        .map_err(to_err)?;
    for r in all_rows(report) {
        w.write_record([
            r.group,
            r.mode,
            r.length.to_string(),
            r.metric,
            format!("{}", r.value),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart with one polyline per named series of `(x, y)` points.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &BTreeMap<String, Vec<(f64, f64)>>,
) -> String {
    let (w, h) = (520.0, 340.0);
    let (left, right, top, bottom) = (60.0, 130.0, 36.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let pts = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        if y.is_finite() {
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x0 > x1 {
        (x0, x1) = (0.0, 1.0);
    }
    if y0 > y1 {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    let mut xs: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let px = sx(x);
        let _ = writeln!(
            s,
            r#"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="black"/>"#,
            top + ph,
            top + ph + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{px:.1}" y="{}" font-size="10" text-anchor="middle">{x}</text>"#,
            top + ph + 16.0
        );
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.1}" x2="{left}" y2="{py:.1}" stroke="black"/>"#,
            left - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{y:.3}</text>"#,
            left - 6.0,
            py + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{0}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        for c in &coords {
            let (cx, cy) = c.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 14.0 * i as f64 + 6.0;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11">{}</text>"#,
            lx + 20.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One chart per metric, series keyed by context group. Returns the files written.
pub fn write_charts(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut by_metric: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in report.flat_rows() {
        by_metric
            .entry(r.metric.clone())
            .or_default()
            .entry(r.group.clone())
            .or_default()
            .push((r.length as f64, r.value));
    }
    let mut written = Vec::new();
    for (metric, series) in &by_metric {
        let svg = line_chart(metric, "context length", metric, series);
        let path = dir.join(format!("{metric}.svg"));
        fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes `<stem>.txt` (ASCII) and `<stem>.pbm` next to each other.
pub fn write_mask_dump(mask: &MaskMatrix, stem: &Path) -> Result<()> {
    let txt = stem.with_extension("txt");
    fs::write(&txt, mask.to_ascii()).map_err(|e| CliError::io(&txt, e))?;
    let pbm = stem.with_extension("pbm");
    fs::write(&pbm, mask.to_pbm()).map_err(|e| CliError::io(&pbm, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_handles_flat_and_single_point_series() {
        let mut series = BTreeMap::new();
        series.insert("a & b".to_string(), vec![(0.0, 0.5)]);
        series.insert("c".to_string(), vec![(0.0, 0.5), (2.0, 0.5)]);
        let svg = line_chart("r2 <rotation>", "context length", "r2", &series);
        assert!(svg.contains("a &amp; b"));
        assert!(svg.contains("r2 &lt;rotation&gt;"));
        assert!(!svg.contains("NaN"));
    }
}
