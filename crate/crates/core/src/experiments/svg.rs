//! Minimal self-contained SVG charts.

use std::fmt::Write;

/// One bar series: `(value, error)` per category.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub values: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, xlabel: &str, ylabel: &str, ymax: f64) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (x0, y0, y1) = (LEFT, H - BOTTOM, TOP);
    let _ = write!(out, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, W - RIGHT);
    let _ = write!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = write!(out, r#"<line x1="{}" y1="{y:.1}" x2="{x0}" y2="{y:.1}" stroke="black"/>"#, x0 - 4.0);
        let _ = write!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0);
    }
    let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (LEFT + W - RIGHT) / 2.0, H - 10.0, escape(xlabel));
    let _ = write!(
        out,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        (TOP + H - BOTTOM) / 2.0,
        escape(ylabel)
    );
}

fn legend(out: &mut String, labels: impl Iterator<Item = String>) {
    for (i, l) in labels.enumerate() {
        let x = W - RIGHT - 150.0;
        let y = TOP + 6.0 + 16.0 * i as f64;
        let _ = write!(out, r#"<rect x="{x}" y="{y}" width="10" height="10" fill="{}"/>"#, PALETTE[i % PALETTE.len()]);
        let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 14.0, y + 9.0, escape(&l));
    }
}

fn y_max(vals: impl Iterator<Item = f64>) -> f64 {
    let m = vals.filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if m <= 1.0 {
        1.0
    } else {
        m.ceil()
    }
}

/// Grouped bar chart with error whiskers; one group per category label.
pub fn bar_chart(title: &str, xlabel: &str, ylabel: &str, categories: &[String], series: &[Series]) -> String {
    let ymax = y_max(series.iter().flat_map(|s| s.values.iter().map(|(v, e)| v + e)));
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, ymax);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = 0.8 * group_w / series.len().max(1) as f64;
    for (c, label) in categories.iter().enumerate() {
        let gx = LEFT + group_w * c as f64;
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            H - BOTTOM + 16.0,
            escape(label)
        );
        for (k, s) in series.iter().enumerate() {
            let Some(&(v, e)) = s.values.get(c) else { continue };
            let x = gx + 0.1 * group_w + bar_w * k as f64;
            let h = plot_h * v.max(0.0) / ymax;
            let y = H - BOTTOM - h;
            let _ = write!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{bar_w:.1}" height="{h:.1}" fill="{}"/>"#,
                PALETTE[k % PALETTE.len()]
            );
            let cx = x + bar_w / 2.0;
            let lo = H - BOTTOM - plot_h * (v - e).max(0.0) / ymax;
            let hi = H - BOTTOM - plot_h * (v + e).min(ymax) / ymax;
            let _ = write!(out, r#"<line x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="black"/>"#);
        }
    }
    legend(&mut out, series.iter().map(|s| s.label.clone()));
    out.push_str("</svg>\n");
    out
}

/// Line chart; each series is a list of `(x, y)` points.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let ymax = y_max(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (xmin, xmax) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let mut out = String::new();
    header(&mut out, title, xlabel, ylabel, ymax);
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + plot_w * (x - xmin) / span;
    let py = |y: f64| H - BOTTOM - plot_h * y / ymax;
    for (k, (_, pts)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = write!(out, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, path.join(" "));
        for &(x, y) in pts {
            let _ = write!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#, px(x), py(y));
            let _ = write!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(x), H - BOTTOM + 16.0);
        }
    }
    legend(&mut out, series.iter().map(|(l, _)| l.clone()));
    out.push_str("</svg>\n");
    out
}
