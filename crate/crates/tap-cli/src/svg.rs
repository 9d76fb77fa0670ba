//! Minimal self-contained SVG plotting: line plots with error bars, horizontal
//! reference lines, and bar charts. No external plotting dependency.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 58.0;

const PALETTE: [&str; 6] = [
    "#1f6fb2", "#d1495b", "#3a7d44", "#8e5ba6", "#c98312", "#3b3b3b",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Symmetric error-bar half-heights aligned with `points`.
    pub err: Option<Vec<f64>>,
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN_L + (v - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT
            - MARGIN_B
            - (v - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).abs();
    if span < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo - 0.06 * span, hi + 0.06 * span)
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (0.001..10000.0).contains(&a) {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{v:.2e}")
    }
}

fn axes(svg: &mut String, f: &Frame, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        svg,
        r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{tx}" y="26" font-family="sans-serif" font-size="16" text-anchor="middle" fill="#222">{title}</text>
"##,
        tx = WIDTH / 2.0
    );
    // frame
    let _ = write!(
        svg,
        r##"<rect x="{x}" y="{y}" width="{w}" height="{h}" fill="none" stroke="#444" stroke-width="1"/>
"##,
        x = MARGIN_L,
        y = MARGIN_T,
        w = WIDTH - MARGIN_L - MARGIN_R,
        h = HEIGHT - MARGIN_T - MARGIN_B
    );
    // ticks
    for i in 0..=4 {
        let xv = f.x_min + (f.x_max - f.x_min) * i as f64 / 4.0;
        let yv = f.y_min + (f.y_max - f.y_min) * i as f64 / 4.0;
        let xp = f.x(xv);
        let yp = f.y(yv);
        let _ = write!(
            svg,
            r##"<line x1="{xp}" y1="{yb}" x2="{xp}" y2="{ybt}" stroke="#444"/>
<text x="{xp}" y="{ylab}" font-family="sans-serif" font-size="11" text-anchor="middle" fill="#333">{xt}</text>
<line x1="{xl}" y1="{yp}" x2="{xlt}" y2="{yp}" stroke="#444"/>
<text x="{xtxt}" y="{ytv}" font-family="sans-serif" font-size="11" text-anchor="end" fill="#333">{yt}</text>
"##,
            yb = HEIGHT - MARGIN_B,
            ybt = HEIGHT - MARGIN_B + 5.0,
            ylab = HEIGHT - MARGIN_B + 18.0,
            xt = fmt_tick(xv),
            xl = MARGIN_L - 5.0,
            xlt = MARGIN_L,
            xtxt = MARGIN_L - 8.0,
            ytv = yp + 4.0,
            yt = fmt_tick(yv),
        );
    }
    let _ = write!(
        svg,
        r##"<text x="{xc}" y="{yb}" font-family="sans-serif" font-size="13" text-anchor="middle" fill="#222">{x_label}</text>
<text x="18" y="{yc}" font-family="sans-serif" font-size="13" text-anchor="middle" fill="#222" transform="rotate(-90 18 {yc})">{y_label}</text>
"##,
        xc = (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        yb = HEIGHT - 14.0,
        yc = (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
    );
}

/// Line plot with optional per-point error bars and dashed horizontal
/// reference lines `(value, label)`.
pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    hlines: &[(f64, String)],
) -> String {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            xs.push(x);
            let e = s.err.as_ref().map(|e| e[i]).unwrap_or(0.0);
            ys.push(y - e);
            ys.push(y + e);
        }
    }
    for &(v, _) in hlines {
        ys.push(v);
    }
    let (x_min, x_max) = pad_range(
        xs.iter().copied().fold(f64::INFINITY, f64::min),
        xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_min, y_max) = pad_range(
        ys.iter().copied().fold(f64::INFINITY, f64::min),
        ys.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let f = Frame {
        x_min,
        x_max,
        y_min,
        y_max,
    };

    let mut svg = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
"##
    );
    axes(&mut svg, &f, title, x_label, y_label);

    for (hi, (v, label)) in hlines.iter().enumerate() {
        let yp = f.y(*v);
        let color = PALETTE[(series.len() + hi) % PALETTE.len()];
        let _ = write!(
            svg,
            r##"<line x1="{x1}" y1="{yp}" x2="{x2}" y2="{yp}" stroke="{color}" stroke-width="1.5" stroke-dasharray="7,5"/>
<text x="{x2}" y="{yt}" font-family="sans-serif" font-size="11" text-anchor="end" fill="{color}">{label}</text>
"##,
            x1 = MARGIN_L,
            x2 = WIDTH - MARGIN_R,
            yt = yp - 5.0,
        );
    }

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if let Some(err) = &s.err {
            for (&(x, y), &e) in s.points.iter().zip(err.iter()) {
                if e <= 0.0 || !e.is_finite() {
                    continue;
                }
                let (xp, y1, y2) = (f.x(x), f.y(y - e), f.y(y + e));
                let _ = write!(
                    svg,
                    r##"<line x1="{xp}" y1="{y1}" x2="{xp}" y2="{y2}" stroke="{color}" stroke-width="1.2"/>
<line x1="{xa}" y1="{y1}" x2="{xb}" y2="{y1}" stroke="{color}" stroke-width="1.2"/>
<line x1="{xa}" y1="{y2}" x2="{xb}" y2="{y2}" stroke="{color}" stroke-width="1.2"/>
"##,
                    xa = xp - 4.0,
                    xb = xp + 4.0,
                );
            }
        }
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", f.x(x), f.y(y)))
            .collect();
        let _ = write!(
            svg,
            r##"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>
"##,
            pts = path.join(" "),
        );
        for &(x, y) in &s.points {
            let _ = write!(
                svg,
                r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="3.2" fill="{color}"/>
"##,
                cx = f.x(x),
                cy = f.y(y),
            );
        }
        let _ = write!(
            svg,
            r##"<text x="{lx}" y="{ly}" font-family="sans-serif" font-size="12" fill="{color}">{label}</text>
"##,
            lx = MARGIN_L + 10.0,
            ly = MARGIN_T + 18.0 + 16.0 * si as f64,
            label = s.label,
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Vertical bar chart with error bars: `(label, value, stderr)` triples.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64, f64)]) -> String {
    let y_hi = bars
        .iter()
        .map(|&(_, v, e)| v + e)
        .fold(f64::NEG_INFINITY, f64::max);
    let y_lo = bars
        .iter()
        .map(|&(_, v, e)| v - e)
        .fold(f64::INFINITY, f64::min);
    let (y_min, y_max) = pad_range(y_lo.min(0.0).max(-0.05), y_hi);
    let f = Frame {
        x_min: 0.0,
        x_max: bars.len() as f64,
        y_min,
        y_max,
    };
    let mut svg = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
"##
    );
    axes(&mut svg, &f, title, "", y_label);
    let slot = (WIDTH - MARGIN_L - MARGIN_R) / bars.len() as f64;
    for (i, (label, v, e)) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let x0 = cx - slot * 0.32;
        let w = slot * 0.64;
        let y = f.y(*v);
        let base = f.y(f.y_min.max(0.0));
        let (top, h) = if y <= base {
            (y, base - y)
        } else {
            (base, y - base)
        };
        let _ = write!(
            svg,
            r##"<rect x="{x0:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="{color}" fill-opacity="0.75"/>
<text x="{cx:.2}" y="{ly}" font-family="sans-serif" font-size="11" text-anchor="middle" fill="#222">{label}</text>
<text x="{cx:.2}" y="{vy:.2}" font-family="sans-serif" font-size="11" text-anchor="middle" fill="#222">{val}</text>
"##,
            ly = HEIGHT - MARGIN_B + 32.0,
            vy = y - 8.0,
            val = fmt_tick(*v),
        );
        if *e > 0.0 && e.is_finite() {
            let (y1, y2) = (f.y(v - e), f.y(v + e));
            let _ = write!(
                svg,
                r##"<line x1="{cx:.2}" y1="{y1:.2}" x2="{cx:.2}" y2="{y2:.2}" stroke="#222" stroke-width="1.4"/>
<line x1="{xa:.2}" y1="{y1:.2}" x2="{xb:.2}" y2="{y1:.2}" stroke="#222" stroke-width="1.4"/>
<line x1="{xa:.2}" y1="{y2:.2}" x2="{xb:.2}" y2="{y2:.2}" stroke="#222" stroke-width="1.4"/>
"##,
                xa = cx - 5.0,
                xb = cx + 5.0,
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_plot_is_wellformed_and_contains_data() {
        let s = line_plot(
            "t",
            "x",
            "y",
            &[Series {
                label: "a".into(),
                points: vec![(0.0, 0.1), (1.0, 0.4), (2.0, 0.3)],
                err: Some(vec![0.02, 0.02, 0.02]),
            }],
            &[(0.25, "ref".into())],
        );
        assert!(s.starts_with("<svg"));
        assert!(s.ends_with("</svg>\n"));
        assert!(s.contains("polyline"));
        assert!(s.contains("stroke-dasharray"));
        assert_eq!(s.matches("<circle").count(), 3);
    }

    #[test]
    fn bar_chart_draws_one_bar_per_entry() {
        let s = bar_chart(
            "t",
            "acc",
            &[
                ("a".into(), 0.8, 0.01),
                ("b".into(), 0.7, 0.02),
                ("c".into(), 0.6, 0.0),
            ],
        );
        assert_eq!(s.matches("<rect").count(), 1 + 1 + 3, "frame + bg + bars");
    }

    #[test]
    fn degenerate_ranges_do_not_produce_nan_coordinates() {
        let s = line_plot(
            "t",
            "x",
            "y",
            &[Series {
                label: "flat".into(),
                points: vec![(1.0, 0.5), (2.0, 0.5)],
                err: None,
            }],
            &[],
        );
        assert!(!s.contains("NaN"));
    }
}
