//! Minimal SVG charts: line series, scatter with identity line, strip plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Optional shaded band drawn under a series: `(x, low, high)`.
pub type Band = Vec<(f64, f64, f64)>;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let span = |v: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.04 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        Frame { x: span(&mut xs.clone()), y: span(&mut ys.clone()) }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str, xlabel: &str, ylabel: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (x0, x1, y0, y1) = (PAD, W - PAD, H - PAD, PAD);
    let _ = writeln!(s, r#"<path d="M{x0},{y1}V{y0}H{x1}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let fx = f.x.0 + (f.x.1 - f.x.0) * k as f64 / 4.0;
        let fy = f.y.0 + (f.y.1 - f.y.0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(fx), y0 + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, f.py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) { format!("{v:.2e}") } else { format!("{v:.2}") }
}

fn legend(s: &mut String, labels: &[&str]) {
    for (k, l) in labels.iter().enumerate() {
        let y = PAD + 14.0 * k as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, W - PAD - 140.0, y - 9.0, COLORS[k % COLORS.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, W - PAD - 125.0, escape(l));
    }
}

fn save(path: &Path, mut s: String) -> Result<()> {
    s.push_str("</svg>\n");
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Line chart with markers, optionally with a band behind the first series.
pub fn line_chart(path: &Path, title: &str, xlabel: &str, ylabel: &str, series: &[Series], band: Option<&Band>) -> Result<()> {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).chain(band.into_iter().flatten().map(|b| b.0));
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .chain(band.into_iter().flatten().flat_map(|b| [b.1, b.2]));
    let f = Frame::fit(xs.collect::<Vec<_>>().into_iter(), ys.collect::<Vec<_>>().into_iter());
    let mut s = open(title, xlabel, ylabel, &f);
    if let Some(b) = band {
        let mut d = String::new();
        for (k, &(x, _, hi)) in b.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2}", if k == 0 { "M" } else { "L" }, f.px(x), f.py(hi));
        }
        for &(x, lo, _) in b.iter().rev() {
            let _ = write!(d, "L{:.2},{:.2}", f.px(x), f.py(lo));
        }
        let _ = writeln!(s, r#"<path d="{d}Z" fill="{}" fill-opacity="0.2" stroke="none"/>"#, COLORS[0]);
    }
    for (k, ser) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let mut d = String::new();
        for (j, &(x, y)) in ser.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2}", if j == 0 { "M" } else { "L" }, f.px(x), f.py(y));
        }
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{c}" stroke-width="1.5"/>"#);
        if ser.points.len() <= 40 {
            for &(x, y) in &ser.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, f.px(x), f.py(y));
            }
        }
    }
    if series.len() > 1 {
        legend(&mut s, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    }
    save(path, s)
}

/// Paired scatter with the one-to-one line.
pub fn paired_scatter(path: &Path, title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> Result<()> {
    let all: Vec<f64> = points.iter().flat_map(|p| [p.0, p.1]).collect();
    let f = Frame::fit(all.clone().into_iter(), all.into_iter());
    let mut s = open(title, xlabel, ylabel, &f);
    let lo = f.x.0.max(f.y.0);
    let hi = f.x.1.min(f.y.1);
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        f.px(lo),
        f.py(lo),
        f.px(hi),
        f.py(hi)
    );
    for &(x, y) in points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#, f.px(x), f.py(y), COLORS[0]);
    }
    save(path, s)
}

/// One jittered column of points per group, with the group mean marked.
pub fn strip_plot(path: &Path, title: &str, ylabel: &str, groups: &[(String, Vec<f64>)]) -> Result<()> {
    let n = groups.len().max(1) as f64;
    let ys = groups.iter().flat_map(|g| g.1.iter().copied()).collect::<Vec<_>>();
    let f = Frame::fit([0.0, n].into_iter(), ys.into_iter());
    let mut s = open(title, "", ylabel, &f);
    for (k, (label, vals)) in groups.iter().enumerate() {
        let cx = k as f64 + 0.5;
        for (j, &v) in vals.iter().enumerate() {
            // deterministic jitter from the golden-ratio sequence
            let jit = ((j as f64 * 0.618_033_988_75).fract() - 0.5) * 0.5;
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.6"/>"#, f.px(cx + jit), f.py(v), COLORS[k % COLORS.len()]);
        }
        if !vals.is_empty() {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let _ = writeln!(s, r#"<line x1="{:.2}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#, f.px(cx - 0.3), f.px(cx + 0.3), f.py(m), f.py(m));
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#, f.px(cx), H - PAD + 30.0, escape(label));
    }
    save(path, s)
}
