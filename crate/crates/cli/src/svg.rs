//! Estimated-versus-true component count chart, written as plain SVG.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::report::GroupSummary;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Axes {
    lo: f64,
    hi: f64,
}

impl Axes {
    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.lo) / (self.hi - self.lo) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.lo) / (self.hi - self.lo) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn series_name(g: &GroupSummary) -> String {
    if g.band.is_empty() {
        g.method.clone()
    } else {
        format!("{} {}", g.method, g.band)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One line per method and band: mean estimated count against the true
/// count, a shaded ribbon of one standard deviation and the identity line.
pub fn count_figure(groups: &[GroupSummary]) -> String {
    let mut series: BTreeMap<String, Vec<&GroupSummary>> = BTreeMap::new();
    for g in groups {
        series.entry(series_name(g)).or_default().push(g);
    }
    let values = groups
        .iter()
        .flat_map(|g| [g.n_true as f64, g.ec_mean - g.ec_sd, g.ec_mean + g.ec_sd]);
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(1.0);
    let ax = Axes {
        lo: (lo - pad).max(0.0),
        hi: hi + pad,
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (ax.x(ax.lo), ax.x(ax.hi), ax.y(ax.lo), ax.y(ax.hi));
    let _ = writeln!(
        s,
        r#"<path class="axes" d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line class="identity" x1="{x0:.1}" y1="{y0:.1}" x2="{x1:.1}" y2="{y1:.1}" stroke="gray" stroke-dasharray="6,4"/>"#
    );
    let mut ticks: Vec<usize> = groups.iter().map(|g| g.n_true).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for t in &ticks {
        let x = ax.x(*t as f64);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#,
            y0 + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">true component count</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">estimated component count</text>"#,
        HEIGHT / 2.0
    );

    for (k, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by_key(|g| g.n_true);
        let color = PALETTE[k % PALETTE.len()];
        let upper: Vec<String> = pts
            .iter()
            .map(|g| format!("{:.1},{:.1}", ax.x(g.n_true as f64), ax.y(g.ec_mean + g.ec_sd)))
            .collect();
        let lower: Vec<String> = pts
            .iter()
            .rev()
            .map(|g| format!("{:.1},{:.1}", ax.x(g.n_true as f64), ax.y(g.ec_mean - g.ec_sd)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon class="ribbon" points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts
            .iter()
            .map(|g| format!("{:.1},{:.1}", ax.x(g.n_true as f64), ax.y(g.ec_mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for g in &pts {
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                ax.x(g.n_true as f64),
                ax.y(g.ec_mean)
            );
        }
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            MARGIN + 10.0,
            ly - 10.0,
            MARGIN + 28.0,
            ly,
            escape(&name)
        );
    }
    s.push_str("</svg>\n");
    s
}
