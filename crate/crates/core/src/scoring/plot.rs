//! Static score-versus-memory scatter plots as standalone SVG.

use std::fmt::Write as _;

use super::{Metric, ScoreReport};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One point per (setting, method): mean memory ratio on x, `metric` on y.
/// Settings are distinguished by color.
pub fn render_svg(reports: &[ScoreReport], metric: Metric) -> String {
    let points: Vec<(usize, &str, f64, f64)> = reports
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.methods.iter().map(move |m| {
                let y = if metric == Metric::AvgA { 100.0 * m.avga } else { m.get(metric) };
                (i, m.method.as_str(), m.mean_ratio(), y)
            })
        })
        .collect();
    let x_max = points.iter().map(|p| p.2).fold(1.0_f64, f64::max);
    let y_max = points.iter().map(|p| p.3).fold(0.0_f64, f64::max).max(1.0) * 1.1;
    let sx = |x: f64| MARGIN + x / x_max * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - y / y_max * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0, x1, y1) = (sx(0.0), sy(0.0), sx(x_max), sy(y_max));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let xv = x_max * k as f64 / 4.0;
        let yv = y_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#,
            sx(xv),
            y0 + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.0}</text>"#,
            x0 - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">task / backbone memory ratio</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" transform="rotate(-90 15 {:.1})" text-anchor="middle">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        metric.label()
    );
    for (i, method, x, y) in &points {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/><text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            sx(*x),
            sy(*y),
            sx(*x) + 6.0,
            sy(*y) - 6.0,
            escape(method)
        );
    }
    for (i, r) in reports.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{}">{}</text>"#,
            WIDTH - MARGIN - 60.0,
            MARGIN + 16.0 * i as f64,
            COLORS[i % COLORS.len()],
            escape(&r.setting.to_string())
        );
    }
    s.push_str("</svg>\n");
    s
}
