//! Self-contained SVG charts. Figures are conveniences; the CSV and JSON
//! outputs are the source of truth.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    /// `log10(1 + x)`, for nonnegative data spanning decades.
    Log1p,
}

impl Scale {
    fn apply(self, v: f64) -> f64 {
        match self {
            Scale::Linear => v,
            Scale::Log1p => (1.0 + v.max(0.0)).log10(),
        }
    }

    fn invert(self, v: f64) -> f64 {
        match self {
            Scale::Linear => v,
            Scale::Log1p => 10f64.powf(v) - 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Series {
    Points { label: String, points: Vec<(f64, f64)> },
    Line { label: String, points: Vec<(f64, f64)> },
}

impl Series {
    fn points(&self) -> &[(f64, f64)] {
        match self {
            Series::Points { points, .. } | Series::Line { points, .. } => points,
        }
    }

    fn label(&self) -> &str {
        match self {
            Series::Points { label, .. } | Series::Line { label, .. } => label,
        }
    }
}

/// XY chart with scatter and line series.
#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub y_scale: Scale,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = write!(
        out,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = TOP + (HEIGHT - TOP - BOTTOM) / 2.0
    );
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }

    fn draw(&self, out: &mut String, y_scale: Scale, x_ticks: bool) {
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = write!(
            out,
            r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            x1 - x0,
            y1 - y0
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let py = self.py(yv);
            let _ = write!(
                out,
                r##"<line x1="{x0}" y1="{py:.2}" x2="{x1}" y2="{py:.2}" stroke="#ddd"/>"##
            );
            let _ = write!(
                out,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                py + 4.0,
                fmt_tick(y_scale.invert(yv))
            );
            if x_ticks {
                let xv = self.x.0 + t * (self.x.1 - self.x.0);
                let px = self.px(xv);
                let _ = write!(
                    out,
                    r#"<text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
                    y1 + 18.0,
                    fmt_tick(xv)
                );
            }
        }
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = TOP + 10.0 + i as f64 * 18.0;
        let x = WIDTH - RIGHT + 12.0;
        let _ = write!(
            out,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 16.0,
            y,
            escape(l)
        );
    }
}

impl Chart {
    pub fn render(&self) -> String {
        let mut out = String::new();
        frame(&mut out, &self.title, &self.x_label, &self.y_label);
        let all = || self.series.iter().flat_map(|s| s.points().iter().copied());
        let axes = Axes {
            x: range(all().map(|p| p.0)),
            y: range(all().map(|p| self.y_scale.apply(p.1))),
        };
        axes.draw(&mut out, self.y_scale, true);
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s
                .points()
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| (axes.px(x), axes.py(self.y_scale.apply(y))))
                .collect();
            match s {
                Series::Points { .. } => {
                    for (x, y) in pts {
                        let _ = write!(
                            out,
                            r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{color}" fill-opacity="0.5"/>"#
                        );
                    }
                }
                Series::Line { .. } => {
                    let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let _ = write!(
                        out,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                        path.join(" ")
                    );
                    for (x, y) in pts {
                        let _ = write!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
                    }
                }
            }
        }
        let labels: Vec<&str> = self.series.iter().map(Series::label).collect();
        legend(&mut out, &labels);
        out.push_str("</svg>\n");
        out
    }
}

/// Overlaid histograms of values in `[lo, hi]`, drawn as step outlines.
pub fn histogram(title: &str, x_label: &str, groups: &[(String, Vec<f64>)], lo: f64, hi: f64, bins: usize) -> String {
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, vals)| {
            let mut c = vec![0.0; bins];
            for &v in vals.iter().filter(|v| v.is_finite()) {
                let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
                c[b] += 1.0;
            }
            let total = vals.len().max(1) as f64;
            c.iter().map(|x| x / total).collect()
        })
        .collect();
    let mut out = String::new();
    frame(&mut out, title, x_label, "fraction of tokens");
    let top = counts.iter().flatten().copied().fold(0.0, f64::max).max(1e-9) * 1.05;
    let axes = Axes {
        x: (lo, hi),
        y: (0.0, top),
    };
    axes.draw(&mut out, Scale::Linear, true);
    for (i, c) in counts.iter().enumerate() {
        let mut pts = vec![(axes.px(lo), axes.py(0.0))];
        for (b, &v) in c.iter().enumerate() {
            let x0 = lo + b as f64 * width;
            pts.push((axes.px(x0), axes.py(v)));
            pts.push((axes.px(x0 + width), axes.py(v)));
        }
        pts.push((axes.px(hi), axes.py(0.0)));
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let color = PALETTE[i % PALETTE.len()];
        let _ = write!(
            out,
            r#"<polyline points="{}" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
    }
    let labels: Vec<&str> = groups.iter().map(|g| g.0.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bars(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    frame(&mut out, title, "", y_label);
    let top = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(1e-9)
        * 1.05;
    let axes = Axes {
        x: (0.0, categories.len().max(1) as f64),
        y: (0.0, top),
    };
    axes.draw(&mut out, Scale::Linear, false);
    let slot = (WIDTH - LEFT - RIGHT) / categories.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let x0 = LEFT + c as f64 * slot + slot * 0.1;
        let _ = write!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + (c as f64 + 0.5) * slot,
            HEIGHT - BOTTOM + 18.0,
            escape(name)
        );
        for (i, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(c).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let y = axes.py(v);
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{bar:.2}" height="{:.2}" fill="{}"/>"#,
                x0 + i as f64 * bar,
                axes.py(0.0) - y,
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.0.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}
