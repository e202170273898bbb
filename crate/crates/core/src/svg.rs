//! Minimal SVG charts: bars with error whiskers and a line with error bars.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

/// One plotted value; `None` marks a failed cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub label: String,
    pub mean: Option<f64>,
    pub std: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Upper end of the value axis, rounded up to a 1/2/5 step.
fn axis_max(points: &[Point]) -> f64 {
    let top = points
        .iter()
        .filter_map(|p| p.mean.map(|m| m + p.std))
        .fold(0.0f64, f64::max);
    if top <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(top.log10().floor());
    for step in [1.0, 2.0, 5.0, 10.0] {
        if step * mag >= top {
            return step * mag;
        }
    }
    10.0 * mag
}

fn frame(out: &mut String, title: &str, y_label: &str, y_max: f64) {
    let plot_h = H - TOP - BOTTOM;
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = TOP + plot_h * (1.0 - i as f64 / 5.0);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            W - RIGHT
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            format_tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#,
        H - BOTTOM
    );
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(y_label)
    );
}

fn format_tick(v: f64) -> String {
    if v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn whisker(out: &mut String, x: f64, lo: f64, hi: f64) {
    let _ = writeln!(
        out,
        r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="black"/>"#
    );
    for y in [lo, hi] {
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="black"/>"#,
            x - 5.0,
            x + 5.0
        );
    }
}

/// Vertical bars at each mean with ±std whiskers.
pub fn bar_chart(title: &str, y_label: &str, points: &[Point]) -> String {
    let mut out = String::new();
    let y_max = axis_max(points);
    frame(&mut out, title, y_label, y_max);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let slot = plot_w / points.len().max(1) as f64;
    let to_y = |v: f64| TOP + plot_h * (1.0 - (v / y_max).clamp(0.0, 1.0));
    for (i, p) in points.iter().enumerate() {
        let cx = LEFT + slot * (i as f64 + 0.5);
        match p.mean {
            Some(m) => {
                let y = to_y(m);
                let _ = writeln!(
                    out,
                    r##"<rect x="{:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="#4a7ab5"/>"##,
                    cx - slot * 0.3,
                    slot * 0.6,
                    H - BOTTOM - y
                );
                whisker(&mut out, cx, to_y(m - p.std), to_y(m + p.std));
            }
            None => {
                let _ = writeln!(
                    out,
                    r##"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" fill="#b00">FAILED</text>"##,
                    H - BOTTOM - 8.0
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            escape(&p.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Polyline through the means at evenly spaced categories, with ±std bars.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[Point]) -> String {
    let mut out = String::new();
    let y_max = axis_max(points);
    frame(&mut out, title, y_label, y_max);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let slot = plot_w / points.len().max(1) as f64;
    let to_y = |v: f64| TOP + plot_h * (1.0 - (v / y_max).clamp(0.0, 1.0));
    let xs: Vec<f64> = (0..points.len()).map(|i| LEFT + slot * (i as f64 + 0.5)).collect();

    let path: Vec<String> = points
        .iter()
        .zip(&xs)
        .filter_map(|(p, x)| p.mean.map(|m| format!("{x:.1},{:.1}", to_y(m))))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#4a7ab5" stroke-width="2"/>"##,
        path.join(" ")
    );
    for (p, &x) in points.iter().zip(&xs) {
        match p.mean {
            Some(m) => {
                whisker(&mut out, x, to_y(m - p.std), to_y(m + p.std));
                let _ = writeln!(
                    out,
                    r##"<circle cx="{x:.1}" cy="{:.1}" r="4" fill="#4a7ab5"/>"##,
                    to_y(m)
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    r##"<text x="{x:.1}" y="{:.1}" text-anchor="middle" fill="#b00">FAILED</text>"##,
                    H - BOTTOM - 8.0
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            escape(&p.label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        H - 20.0,
        escape(x_label)
    );
    out.push_str("</svg>\n");
    out
}
