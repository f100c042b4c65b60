//! Curve CSV files and SVG line plots.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::{ConvergenceCurve, Direction};

pub const CSV_HEADER: &str = "step,value";

/// Plain decimal with 17 significant digits; exponent form outside
/// `[1e-6, 1e15)`.
pub fn fmt_decimal(v: f64) -> String {
    if v == 0.0 {
        return "0.0000000000000000".into();
    }
    let mag = v.abs();
    if !(1e-6..1e15).contains(&mag) {
        return format!("{v:.16e}");
    }
    let digits = (16 - mag.log10().floor() as i64).max(0) as usize;
    format!("{v:.digits$}")
}

pub fn curve_to_csv(c: &ConvergenceCurve) -> String {
    let mut out = String::with_capacity(32 * (c.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (s, v) in c.points() {
        let _ = writeln!(out, "{s},{}", fmt_decimal(*v));
    }
    out
}

/// Reads a `step,value` CSV. Blank lines are skipped and CRLF is accepted.
pub fn curve_from_csv(
    text: &str,
    metric_name: &str,
    max_value: f64,
    direction: Direction,
) -> Result<ConvergenceCurve> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match lines.next() {
        Some(h) if h.replace(' ', "") == CSV_HEADER => {}
        Some(h) => return Err(Error::Parse(format!("expected header `{CSV_HEADER}`, got `{h}`"))),
        None => return Err(Error::EmptyCurve),
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::Parse(format!("row {}: `{line}`", i + 1));
        let (s, v) = line.split_once(',').ok_or_else(bad)?;
        let step: u64 = s.trim().parse().map_err(|_| bad())?;
        let value: f64 = v.trim().parse().map_err(|_| bad())?;
        points.push((step, value));
    }
    ConvergenceCurve::new(points, metric_name, max_value, direction)
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn from_curve(label: impl Into<String>, c: &ConvergenceCurve) -> Self {
        Series {
            label: label.into(),
            points: c.points().iter().map(|&(s, v)| (s as f64, v)).collect(),
        }
    }
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

/// Line plot on an 800x500 canvas with axes, ticks and a legend.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (tx, ty) = (px(xv), py(yv));
        let _ = writeln!(
            s,
            r##"<line x1="{tx:.2}" y1="{:.2}" x2="{tx:.2}" y2="{:.2}" stroke="#ccc"/><text x="{tx:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP,
            TOP + ph,
            TOP + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{ty:.2}" x2="{:.2}" y2="{ty:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            ty + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e6).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
