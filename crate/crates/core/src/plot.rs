//! Line charts of CSV series as standalone SVG.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Columns treated as sequence lengths and drawn on a log axis.
const LENGTH_AXES: [&str; 4] = ["vi", "vq", "t", "step"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub x: String,
    pub y: String,
    /// Column whose values split rows into separate lines.
    pub series: Option<String>,
    /// Half-width column for a shaded band; `None` uses `ci95` if present.
    pub ci: Option<String>,
    /// `None` picks log scale for length-like columns.
    pub log_x: Option<bool>,
}

impl PlotSpec {
    pub fn new(x: &str, y: &str) -> Self {
        PlotSpec {
            x: x.into(),
            y: y.into(),
            series: None,
            ci: None,
            log_x: None,
        }
    }
}

#[derive(Debug, Default)]
struct Series {
    name: String,
    points: Vec<(f64, f64, f64)>,
}

fn column(header: &[&str], name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| *h == name)
        .ok_or_else(|| Error::Config(format!("column {name:?} not in CSV header")))
}

fn num(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: {field:?} is not a number")))
}

/// Render `csv` (with a header row) as an SVG line chart.
pub fn render_svg(csv: &str, spec: &PlotSpec) -> Result<String> {
    let bad = |e: csv::Error| Error::Config(format!("malformed CSV: {e}"));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv.as_bytes());
    let header: Vec<String> = reader.headers().map_err(bad)?.iter().map(str::to_string).collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(Error::Config("empty CSV".into()));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let xi = column(&header, &spec.x)?;
    let yi = column(&header, &spec.y)?;
    let si = spec.series.as_deref().map(|s| column(&header, s)).transpose()?;
    let ci = match &spec.ci {
        Some(c) => Some(column(&header, c)?),
        None => header.iter().position(|h| *h == "ci95"),
    };
    let log_x = spec.log_x.unwrap_or(LENGTH_AXES.contains(&spec.x.as_str()));

    let mut series: Vec<Series> = Vec::new();
    for (n, rec) in reader.records().enumerate() {
        let f = rec.map_err(bad)?;
        let line = n + 2;
        let name = si.map(|i| f[i].to_string()).unwrap_or_default();
        let x = num(&f[xi], line)?;
        let y = num(&f[yi], line)?;
        let band = ci.map(|i| num(&f[i], line)).transpose()?.unwrap_or(0.0);
        if log_x && x <= 0.0 {
            return Err(Error::Config(format!("line {line}: nonpositive x on a log axis")));
        }
        let k = match series.iter().position(|s| s.name == name) {
            Some(k) => k,
            None => {
                series.push(Series {
                    name,
                    points: Vec::new(),
                });
                series.len() - 1
            }
        };
        series[k].points.push((x, y, band));
    }
    if series.is_empty() {
        return Err(Error::Config("CSV has no data rows".into()));
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    let tx = |x: f64| if log_x { x.log10() } else { x };
    let all = series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, b) in all {
        x0 = x0.min(tx(x));
        x1 = x1.max(tx(x));
        y0 = y0.min(y - b);
        y1 = y1.max(y + b);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5 * y0.abs().max(1e-3);
        y1 += 0.5 * y1.abs().max(1e-3);
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();

    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let y = py(v);
        writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 4.0,
            y + 4.0,
            tick_label(v)
        )
        .unwrap();
    }
    for v in x_ticks(x0, x1, log_x) {
        let x = px(v);
        writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 16.0,
            tick_label(v)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        xml_escape(&spec.x),
        if log_x { " (log)" } else { "" }
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        xml_escape(&spec.y)
    )
    .unwrap();

    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if ci.is_some() {
            let upper = ser.points.iter().map(|&(x, y, b)| (px(x), py(y + b)));
            let lower = ser.points.iter().rev().map(|&(x, y, b)| (px(x), py(y - b)));
            writeln!(
                s,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                coords(upper.chain(lower))
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords(ser.points.iter().map(|&(x, y, _)| (px(x), py(y))))
        )
        .unwrap();
        for &(x, y, _) in &ser.points {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#, px(x), py(y)).unwrap();
        }
        if !ser.name.is_empty() {
            let ly = TOP + 14.0 + 16.0 * k as f64;
            let lx = LEFT + pw + 10.0;
            writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 18.0,
                lx + 22.0,
                ly + 4.0,
                xml_escape(&ser.name)
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn coords(points: impl Iterator<Item = (f64, f64)>) -> String {
    points.map(|(x, y)| format!("{x:.2},{y:.2}")).collect::<Vec<_>>().join(" ")
}

/// Tick positions in data units (not transformed).
fn x_ticks(x0: f64, x1: f64, log_x: bool) -> Vec<f64> {
    if log_x {
        // Powers of two, thinned to at most about ten labels.
        let (lo, hi) = ((x0 / 2f64.log10()).ceil() as i32, (x1 / 2f64.log10()).floor() as i32);
        let stride = ((hi - lo) / 10 + 1).max(1);
        (lo..=hi).step_by(stride as usize).map(|e| 2f64.powi(e)).collect()
    } else {
        (0..=4).map(|k| x0 + (x1 - x0) * k as f64 / 4.0).collect()
    }
}

fn tick_label(v: f64) -> String {
    if v == v.round() && v.abs() < 1e7 {
        format!("{}", v as i64)
    } else if v.abs() >= 1e-2 && v.abs() < 1e4 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
