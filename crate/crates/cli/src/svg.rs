//! Minimal SVG line charts for sweep results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::SweepConfig;
use crate::error::{CliError, CliResult};
use crate::sweep::SweepRow;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= 0.0 {
        y1 = 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / y1 * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for t in 0..=4 {
        let fx = x0 + (x1 - x0) * t as f64 / 4.0;
        let fy = y1 * t as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(fx), H - PAD + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, PAD - 6.0, sy(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 18.0, esc(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        esc(y_label),
        y = H / 2.0
    );
    for (n, ser) in series.iter().enumerate() {
        let color = COLORS[n % COLORS.len()];
        let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#, path.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = PAD + 16.0 * n as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, W - PAD - 150.0, esc(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn esc(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean rows grouped by everything except the x column.
fn mean_series(rows: &[SweepRow], over_dims: bool, value: impl Fn(&SweepRow) -> Option<f64>) -> Vec<Series> {
    let mut groups: BTreeMap<(u64, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.seed == "mean") {
        let Some(v) = value(r) else { continue };
        let (key, x) = if over_dims {
            ((r.alpha.to_bits(), r.width), r.d as f64)
        } else {
            ((r.alpha.to_bits(), 0), r.width as f64)
        };
        groups.entry(key).or_default().push((x, v));
    }
    groups
        .into_iter()
        .map(|((a, w), points)| Series {
            label: if over_dims {
                format!("alpha={} k={w}", f64::from_bits(a))
            } else {
                format!("alpha={}", f64::from_bits(a))
            },
            points,
            dashed: false,
        })
        .collect()
}

pub fn write_plots(dir: &Path, cfg: &SweepConfig, rows: &[SweepRow]) -> CliResult<()> {
    let over_dims = cfg.dims.len() > 1;
    let x_label = if over_dims { "input dimension d" } else { "width k" };
    let mut flips = mean_series(rows, over_dims, |r| r.joint_flip_size);
    if over_dims {
        flips.push(Series {
            label: "sqrt(d)".into(),
            points: cfg.dims.iter().map(|&d| (d as f64, (d as f64).sqrt())).collect(),
            dashed: true,
        });
    }
    let ratio = mean_series(rows, over_dims, |r| r.margin_ratio);
    for (name, title, y, series) in [
        ("flip_size.svg", "minimal joint flip size along z", "flip size", flips),
        ("margin_ratio.svg", "fraction of samples on the margin", "ratio", ratio),
    ] {
        let path = dir.join(name);
        fs::write(&path, line_chart(title, x_label, y, &series)).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}
