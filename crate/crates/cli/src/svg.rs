//! Minimal SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 200.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stroke {
    Solid,
    Dashed,
    Dotted,
    DashDot,
}

impl Stroke {
    fn dasharray(self) -> Option<&'static str> {
        match self {
            Stroke::Solid => None,
            Stroke::Dashed => Some("8,4"),
            Stroke::Dotted => Some("2,3"),
            Stroke::DashDot => Some("8,3,2,3"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub stroke: Stroke,
}

#[derive(Debug, Clone)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|f| f * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

impl LinePlot {
    pub fn new(title: &str, x_label: &str, y_label: &str, log_y: bool) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_y,
            series: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, points: Vec<(f64, f64)>, stroke: Stroke) {
        self.series.push(Series { name: name.into(), points, stroke });
    }

    fn transform_y(&self, y: f64) -> Option<f64> {
        if self.log_y {
            (y > 0.0 && y.is_finite()).then(|| y.log10())
        } else {
            y.is_finite().then_some(y)
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
        let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                if let (true, Some(ty)) = (x.is_finite(), self.transform_y(y)) {
                    xs = (xs.0.min(x), xs.1.max(x));
                    ys = (ys.0.min(ty), ys.1.max(ty));
                }
            }
        }
        if !xs.0.is_finite() {
            xs = (0.0, 1.0);
            ys = (0.0, 1.0);
        }
        if xs.1 <= xs.0 {
            xs.1 = xs.0 + 1.0;
        }
        if ys.1 <= ys.0 {
            ys = (ys.0 - 0.5, ys.1 + 0.5);
        }
        if self.log_y {
            ys = (ys.0.floor(), ys.1.ceil());
        }
        (xs.0, xs.1, ys.0, ys.1)
    }

    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#, MARGIN_L + pw / 2.0, esc(&self.title));
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for t in nice_ticks(x0, x1, 6) {
            let x = sx(t);
            let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/>"##, MARGIN_T, MARGIN_T + ph);
            let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, MARGIN_T + ph + 18.0, fmt_tick(t));
        }
        let yticks: Vec<f64> = if self.log_y {
            let step = ((y1 - y0) / 8.0).ceil().max(1.0);
            let mut v = Vec::new();
            let mut t = y0;
            while t <= y1 + 1e-9 {
                v.push(t);
                t += step;
            }
            v
        } else {
            nice_ticks(y0, y1, 6)
        };
        for t in yticks {
            let y = sy(t);
            let label = if self.log_y { format!("1e{}", t.round() as i64) } else { fmt_tick(t) };
            let _ = writeln!(out, r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, MARGIN_L, MARGIN_L + pw);
            let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, MARGIN_L - 6.0, y + 4.0);
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, MARGIN_L + pw / 2.0, HEIGHT - 16.0, esc(&self.x_label));
        let _ = writeln!(
            out,
            r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            esc(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let dash = s
                .stroke
                .dasharray()
                .map(|d| format!(r#" stroke-dasharray="{d}""#))
                .unwrap_or_default();
            // Break the polyline wherever a point cannot be drawn.
            let mut runs: Vec<Vec<String>> = vec![Vec::new()];
            for &(x, y) in &s.points {
                match self.transform_y(y) {
                    Some(ty) if x.is_finite() => runs.last_mut().unwrap().push(format!("{:.2},{:.2}", sx(x), sy(ty))),
                    _ => runs.push(Vec::new()),
                }
            }
            for run in runs.iter().filter(|r| r.len() > 1) {
                let _ = writeln!(
                    out,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.6"{dash} points="{}"/>"#,
                    run.join(" ")
                );
            }
            for run in runs.iter().filter(|r| r.len() == 1) {
                let (px, py) = run[0].split_once(',').unwrap();
                let _ = writeln!(out, r#"<circle cx="{px}" cy="{py}" r="2" fill="{color}"/>"#);
            }
            let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
            let lx = WIDTH - MARGIN_R + 12.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="1.6"{dash}/>"#,
                lx + 28.0
            );
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 34.0, ly + 4.0, esc(&s.name));
        }
        out.push_str("</svg>\n");
        out
    }
}

fn fmt_tick(t: f64) -> String {
    if t == 0.0 {
        "0".into()
    } else if t.abs() >= 1e4 || t.abs() < 1e-3 {
        format!("{t:.1e}")
    } else {
        let s = format!("{t:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}
