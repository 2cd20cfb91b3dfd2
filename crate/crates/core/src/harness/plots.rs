//! Static SVG figures from a metrics file: accuracy curves and a gamma heatmap.
//!
//! Output is plain text with fixed number formatting, so equal metrics give
//! byte-identical figures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{read_metrics, MetricsRecord};
use crate::error::Result;

pub const ACCURACY_FILE: &str = "accuracy.svg";
pub const GAMMA_FILE: &str = "gamma_heatmap.svg";

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Reads `metrics` and writes both figures into `out_dir`; returns their paths.
pub fn emit_plots(metrics: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let records = read_metrics(metrics)?;
    std::fs::create_dir_all(out_dir)?;
    let acc = out_dir.join(ACCURACY_FILE);
    let gamma = out_dir.join(GAMMA_FILE);
    std::fs::write(&acc, accuracy_svg(&records))?;
    std::fs::write(&gamma, gamma_svg(&records))?;
    Ok(vec![acc, gamma])
}

/// Accuracy against round, one polyline per evaluation mode; one marker per round.
pub fn accuracy_svg(records: &[MetricsRecord]) -> String {
    let mut s = header(W, H);
    let n = records.len();
    let x_of = |i: usize| {
        if n <= 1 {
            MARGIN + (W - 2.0 * MARGIN) / 2.0
        } else {
            MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64
        }
    };
    let y_of = |a: f64| H - MARGIN - (H - 2.0 * MARGIN) * a.clamp(0.0, 1.0);
    let _ = writeln!(
        s,
        r##"<rect x="{m}" y="{m}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#444"/>"##,
        m = MARGIN,
        w = W - 2.0 * MARGIN,
        h = H - 2.0 * MARGIN
    );
    for tick in 0..=4 {
        let a = tick as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{a:.2}</text>"#, MARGIN - 4.0, y_of(a) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">round</text>"#, W / 2.0, H - 12.0);
    type Series = (&'static str, &'static str, fn(&MetricsRecord) -> f64);
    let series: [Series; 3] = [
        ("complete", "#1f77b4", |r| r.accuracy.complete),
        ("image_only", "#ff7f0e", |r| r.accuracy.image_only),
        ("text_only", "#2ca02c", |r| r.accuracy.text_only),
    ];
    for (k, (name, color, get)) in series.iter().enumerate() {
        let pts: Vec<String> = records.iter().enumerate().map(|(i, r)| format!("{:.2},{:.2}", x_of(i), y_of(get(r)))).collect();
        let _ = writeln!(s, r#"<g class="series" data-mode="{name}">"#);
        if n > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        }
        for (i, r) in records.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" data-round="{}"/>"#,
                x_of(i),
                y_of(get(r)),
                r.round
            );
        }
        let _ = writeln!(s, "</g>");
        let ly = MARGIN + 14.0 * k as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{color}">{name}</text>"#,
            W - MARGIN - 80.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Rows are rounds, columns are sampled-participant positions; darker is heavier.
pub fn gamma_svg(records: &[MetricsRecord]) -> String {
    let rows = records.len();
    let cols = records.iter().map(|r| r.gamma.len()).max().unwrap_or(0);
    let max = records.iter().flat_map(|r| r.gamma.iter().copied()).fold(0.0_f64, f64::max);
    let cell = 16.0;
    let (w, h) = (2.0 * MARGIN + cell * cols as f64, 2.0 * MARGIN + cell * rows as f64);
    let mut s = header(w, h);
    let _ = writeln!(s, r#"<g class="heatmap" data-rows="{rows}" data-cols="{cols}">"#);
    for (i, r) in records.iter().enumerate() {
        for (j, &g) in r.gamma.iter().enumerate() {
            let t = if max > 0.0 { g / max } else { 0.0 };
            let shade = (255.0 * (1.0 - t)).round().clamp(0.0, 255.0) as u8;
            let _ = writeln!(
                s,
                r#"<rect class="cell" x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" data-round="{}" data-gamma="{g:.6}"/>"#,
                MARGIN + cell * j as f64,
                MARGIN + cell * i as f64,
                r.round
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">participant</text>"#, w / 2.0, MARGIN - 10.0);
    s.push_str("</svg>\n");
    s
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}
