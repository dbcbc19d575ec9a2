//! Minimal SVG charts: a line chart and a log-log heatmap scatter.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        H - 15.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn axes(out: &mut String, f: &Frame, xfmt: impl Fn(f64) -> String, yfmt: impl Fn(f64) -> String) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let (px, py) = (f.px(xv), f.py(yv));
        let _ = writeln!(out, r#"<line x1="{px}" y1="{y1}" x2="{px}" y2="{}" stroke="black"/>"#, y1 + 5.0);
        let _ = writeln!(out, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, y1 + 20.0, xfmt(xv));
        let _ = writeln!(out, r#"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 8.0,
            py + 4.0,
            yfmt(yv)
        );
    }
}

/// Line chart with markers, one polyline per series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let f = Frame {
        x: span(series.iter().flat_map(|s| s.points.iter().map(|p| p.0))),
        y: span(series.iter().flat_map(|s| s.points.iter().map(|p| p.1))),
    };
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel);
    axes(&mut out, &f, |v| format!("{v:.3}"), |v| format!("{v:.2}"));
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = TOP + 20.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT + 15.0,
            ly,
            W - RIGHT + 32.0,
            ly + 10.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn heat_color(v: f64) -> String {
    // dark blue (0) to yellow (1)
    let v = v.clamp(0.0, 1.0);
    let r = (30.0 + 225.0 * v) as u8;
    let g = (30.0 + 200.0 * v) as u8;
    let b = (120.0 * (1.0 - v)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Scatter of `(x, y, value in [0, 1])` on log10 axes, colored by value.
pub fn log_heatmap(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64, f64)]) -> String {
    let lx = |x: f64| x.max(f64::MIN_POSITIVE).log10();
    let f = Frame {
        x: span(points.iter().map(|p| lx(p.0))),
        y: span(points.iter().map(|p| lx(p.1))),
    };
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel);
    axes(&mut out, &f, |v| format!("{:.1e}", 10f64.powf(v)), |v| format!("{:.0}", 10f64.powf(v)));
    for &(x, y, v) in points {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="7" fill="{}" stroke="black" stroke-width="0.5"/>"#,
            f.px(lx(x)),
            f.py(lx(y)),
            heat_color(v)
        );
    }
    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let y = H - BOTTOM - v * (H - TOP - BOTTOM);
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{:.2}" width="16" height="{:.2}" fill="{}"/>"#,
            W - RIGHT + 20.0,
            y - (H - TOP - BOTTOM) / 10.0,
            (H - TOP - BOTTOM) / 10.0,
            heat_color(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">1 (best)</text><text x="{}" y="{}">0</text>"#,
        W - RIGHT + 40.0,
        TOP + 10.0,
        W - RIGHT + 40.0,
        H - BOTTOM
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_well_formed() {
        let s = line_chart(
            "best score vs delay",
            "delay",
            "score",
            &[Series {
                name: "best <mean>".into(),
                points: vec![(0.0, 1.0), (5.0, 0.5), (50.0, -0.7)],
            }],
        );
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("&lt;mean&gt;"));
        assert_eq!(s.matches("<circle").count(), 3);
    }

    #[test]
    fn heatmap_handles_single_point() {
        let s = log_heatmap("search", "lr", "batch", &[(1e-3, 32.0, 1.0)]);
        assert_eq!(s.matches("r=\"7\"").count(), 1);
        assert!(!s.contains("NaN"));
    }
}
