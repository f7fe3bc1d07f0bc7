// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Minimal SVG line charts of per-round metrics.

use std::fmt::Write;

use crate::metrics::RoundRecord;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

type Extract = fn(&RoundRecord) -> Option<f64>;

const PANELS: [(&str, Extract); 4] = [
    ("accuracy", |r| r.mean_accuracy),
    ("cross-entropy loss", |r| r.mean_loss),
    ("modularity", |r| r.modularity),
    ("time per round", |r| Some(r.round_time)),
];

/// Renders a 2x2 grid of accuracy, loss, modularity and per-round time, one
/// line per labelled series.
pub fn render_curves(series: &[(&str, &[RoundRecord])]) -> String {
    let width = 2.0 * PANEL_W;
    let height = 2.0 * PANEL_H + 30.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (k, (title, extract)) in PANELS.iter().enumerate() {
        let ox = (k % 2) as f64 * PANEL_W;
        let oy = (k / 2) as f64 * PANEL_H;
        panel(&mut svg, ox, oy, title, *extract, series);
    }
    for (i, (name, _)) in series.iter().enumerate() {
        let x = MARGIN + i as f64 * 140.0;
        let y = height - 12.0;
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            x + 20.0,
            x + 25.0,
            y + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn panel(svg: &mut String, ox: f64, oy: f64, title: &str, extract: Extract, series: &[(&str, &[RoundRecord])]) {
    let points: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, recs)| {
            recs.iter()
                .filter_map(|r| extract(r).map(|v| (r.round as f64, v)))
                .collect()
        })
        .collect();
    let all = points.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let plot_w = PANEL_W - 1.5 * MARGIN;
    let plot_h = PANEL_H - 1.5 * MARGIN;
    let left = ox + MARGIN;
    let top = oy + MARGIN * 0.5;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| top + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888"/>"##
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-weight="bold">{}</text>"#, left, top - 6.0, escape(title));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, top + 10.0, fmt_tick(y1));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, top + plot_h, fmt_tick(y0));
    let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, left, top + plot_h + 14.0, fmt_tick(x0));
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end">round {}</text>"#,
        left + plot_w,
        top + plot_h + 14.0,
        fmt_tick(x1)
    );
    for (i, pts) in points.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            path.join(" ")
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
