//! Self-contained SVG line and scatter plots.
//!
//! Line series become one `<polyline>` per finite run of points, marker
//! series become `<circle>`s, and fitted lines are `<line>` elements with a
//! text label. Output depends only on the input, so identical data yields
//! identical bytes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::stats::LineFit;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesStyle {
    Line,
    Markers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: SeriesStyle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOverlay {
    pub fit: LineFit,
    pub x_range: (f64, f64),
    /// Index into the plot's series, for the color.
    pub series: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub fits: Vec<FitOverlay>,
    pub fingerprint: u64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

impl Plot {
    pub fn render(&self) -> Result<String> {
        let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &self.series {
            for p in s.points.iter().filter(finite) {
                xs.push(p.0);
                ys.push(p.1);
            }
        }
        if xs.is_empty() {
            return Err(Error::EmptyData);
        }
        for f in &self.fits {
            for x in [f.x_range.0, f.x_range.1] {
                let y = f.fit.slope * x + f.fit.intercept;
                if x.is_finite() && y.is_finite() {
                    xs.push(x);
                    ys.push(y);
                }
            }
        }
        let (x0, x1) = padded(xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let (y0, y1) = padded(ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let fr = Frame { x0, x1, y0, y1 };

        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(w, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
        let _ = writeln!(w, "<!-- config: {:016x} -->", self.fingerprint);
        let _ = writeln!(w, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            w,
            r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            WIDTH - LEFT - RIGHT,
            HEIGHT - TOP - BOTTOM
        );
        for i in 0..=4 {
            let xv = x0 + (x1 - x0) * i as f64 / 4.0;
            let yv = y0 + (y1 - y0) * i as f64 / 4.0;
            let (px, py) = (fr.px(xv), fr.py(yv));
            let base = HEIGHT - BOTTOM;
            let _ = writeln!(w, r#"<line x1="{px:.2}" y1="{base:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, base + 5.0);
            let _ = writeln!(w, r#"<text x="{px:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, base + 18.0, tick_label(xv));
            let _ = writeln!(w, r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT:.2}" y2="{py:.2}" stroke="black"/>"#, LEFT - 5.0);
            let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#, LEFT - 8.0, py + 4.0, tick_label(yv));
        }
        let _ = writeln!(w, r#"<text x="{:.2}" y="24" font-size="14" text-anchor="middle">{}</text>"#, (LEFT + WIDTH - RIGHT) / 2.0, escape(&self.title));
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#, (LEFT + WIDTH - RIGHT) / 2.0, HEIGHT - 20.0, escape(&self.x_label));
        let _ = writeln!(
            w,
            r#"<text x="20" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
            (TOP + HEIGHT - BOTTOM) / 2.0,
            (TOP + HEIGHT - BOTTOM) / 2.0,
            escape(&self.y_label)
        );

        for (si, s) in self.series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            match s.style {
                SeriesStyle::Line => {
                    for run in s.points.split(|p| !(p.0.is_finite() && p.1.is_finite())) {
                        if run.is_empty() {
                            continue;
                        }
                        let coords: Vec<String> = run.iter().map(|p| format!("{:.2},{:.2}", fr.px(p.0), fr.py(p.1))).collect();
                        let _ = writeln!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
                    }
                }
                SeriesStyle::Markers => {
                    for p in s.points.iter().filter(finite) {
                        let _ = writeln!(w, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#, fr.px(p.0), fr.py(p.1));
                    }
                }
            }
            let ly = TOP + 16.0 * (si as f64 + 1.0);
            let lx = WIDTH - RIGHT + 12.0;
            let _ = writeln!(w, r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{color}"/>"#, ly - 9.0);
            let _ = writeln!(w, r#"<text x="{:.2}" y="{ly:.2}" font-size="11">{}</text>"#, lx + 14.0, escape(&s.name));
        }
        for f in &self.fits {
            let color = PALETTE[f.series % PALETTE.len()];
            let (a, b) = f.x_range;
            let (ya, yb) = (f.fit.slope * a + f.fit.intercept, f.fit.slope * b + f.fit.intercept);
            let _ = writeln!(
                w,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="6 3"/>"#,
                fr.px(a),
                fr.py(ya),
                fr.px(b),
                fr.py(yb)
            );
            let _ = writeln!(
                w,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">slope = {:.3}</text>"#,
                fr.px(b) + 4.0,
                fr.py(yb),
                f.fit.slope
            );
        }
        out.push_str("</svg>\n");
        Ok(out)
    }
}
