//! Minimal static SVG charts: polylines, markers and horizontal reference lines.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mark {
    Line,
    Points,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub mark: Mark,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Horizontal dashed lines `(label, y)`.
    pub references: Vec<(String, f64)>,
    pub note: Option<String>,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * lo.abs().max(1.0) {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

impl Chart {
    pub fn render(&self) -> String {
        let (x0, x1) = range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y0, y1) = range(
            self.series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.1))
                .chain(self.references.iter().map(|r| r.1)),
        );
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + plot_w / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect class="frame" x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                sx(fx),
                TOP + plot_h + 18.0,
                tick_label(fx)
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                sy(fy) + 4.0,
                tick_label(fy)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 16.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0,
            escape(&self.y_label)
        );

        let mut legend_y = TOP + 10.0;
        let legend_x = WIDTH - RIGHT + 14.0;
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let finite = series.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite());
            match series.mark {
                Mark::Line => {
                    let coords: Vec<String> = finite.map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
                        coords.join(" ")
                    );
                }
                Mark::Points => {
                    for &(x, y) in finite {
                        let _ = writeln!(
                            s,
                            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                            sx(x),
                            sy(y)
                        );
                    }
                }
            }
            let _ = writeln!(
                s,
                r#"<rect x="{legend_x:.2}" y="{:.2}" width="12" height="3" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                legend_y - 4.0,
                legend_x + 18.0,
                legend_y,
                escape(&series.label)
            );
            legend_y += 18.0;
        }
        for (label, y) in &self.references {
            let _ = writeln!(
                s,
                r#"<line class="reference" x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-dasharray="6 4"/>"#,
                sy(*y),
                LEFT + plot_w,
                sy(*y)
            );
            let _ = writeln!(
                s,
                r#"<text x="{legend_x:.2}" y="{:.2}">- - {}</text>"#,
                legend_y,
                escape(label)
            );
            legend_y += 18.0;
        }
        if let Some(note) = &self.note {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                LEFT + 8.0,
                TOP + 16.0,
                escape(note)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_lines_and_one_reference() {
        let chart = Chart {
            series: (0..3)
                .map(|i| Series {
                    label: format!("run {i}"),
                    points: vec![(0.0, 1.0 + i as f64), (1.0, 0.5)],
                    mark: Mark::Line,
                })
                .collect(),
            references: vec![("floor".into(), 0.2)],
            ..Chart::default()
        };
        let svg = chart.render();
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg.matches(r#"class="reference""#).count(), 1);
        assert_eq!(svg, chart.render());
    }

    #[test]
    fn labels_are_escaped_and_flat_data_renders() {
        let chart = Chart {
            title: "a < b & c".into(),
            series: vec![Series {
                label: "flat".into(),
                points: vec![(1.0, 2.0), (2.0, 2.0)],
                mark: Mark::Points,
            }],
            ..Chart::default()
        };
        let svg = chart.render();
        assert!(svg.contains("a &lt; b &amp; c"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(!svg.contains("NaN"));
    }
}
