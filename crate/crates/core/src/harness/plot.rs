//! Minimal deterministic SVG line charts.

use std::fmt::Write as _;

use super::metrics::{KinematicTrace, MetricsSummary};
use crate::error::{Error, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const MARGIN: (f64, f64, f64, f64) = (56.0, 150.0, 36.0, 44.0);

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub width: u32,
    pub height: u32,
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    (x0, x1, y0.min(0.0), y1)
}

/// Render series as polylines with a legend. Fails on an empty series list
/// or a non-finite point.
pub fn line_chart(chart: &Chart<'_>, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::InvalidArgument(format!("nothing to plot for '{}'", chart.title)));
    }
    if series
        .iter()
        .flat_map(|s| &s.points)
        .any(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(Error::NonFinite(format!("plot '{}'", chart.title)));
    }
    let (w, h) = (chart.width as f64, chart.height as f64);
    let (left, right, top, bottom) = MARGIN;
    let (pw, ph) = ((w - left - right).max(1.0), (h - top - bottom).max(1.0));
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        chart.width, chart.height
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-size="14">{}</text>"#,
        left, chart.title
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 8.0,
        chart.x_label
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        chart.y_label
    );
    for (i, ser) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.8" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 + 16.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick_label(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.2}")
    }
}

/// One series per strategy from per-delay rows, in first-appearance order.
pub fn per_delay_series(rows: &[MetricsSummary], value: fn(&MetricsSummary) -> f64) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows.iter().filter(|r| r.h.is_none()) {
        let point = (r.d as f64, value(r));
        match out.iter_mut().find(|s| s.label == r.strategy) {
            Some(s) => s.points.push(point),
            None => out.push(Series {
                label: r.strategy.clone(),
                points: vec![point],
            }),
        }
    }
    out
}

pub fn success_vs_delay(rows: &[MetricsSummary], width: u32, height: u32) -> Result<String> {
    let chart = Chart {
        title: "Success rate vs. inference delay",
        x_label: "delay d (ticks)",
        y_label: "success rate",
        width,
        height,
    };
    line_chart(&chart, &per_delay_series(rows, |r| r.success_rate))
}

pub fn ticks_vs_delay(rows: &[MetricsSummary], width: u32, height: u32) -> Result<String> {
    let chart = Chart {
        title: "Completion time vs. inference delay",
        x_label: "delay d (ticks)",
        y_label: "mean ticks",
        width,
        height,
    };
    line_chart(&chart, &per_delay_series(rows, |r| r.mean_ticks))
}

/// Speed traces of one shared episode, one line per strategy.
pub fn kinematics_overlay(traces: &[(String, KinematicTrace)], width: u32, height: u32) -> Result<String> {
    let series: Vec<Series> = traces
        .iter()
        .map(|(label, t)| Series {
            label: label.clone(),
            points: t.speed.iter().enumerate().map(|(k, v)| (k as f64, *v)).collect(),
        })
        .collect();
    let chart = Chart {
        title: "Speed along one episode",
        x_label: "tick",
        y_label: "speed",
        width,
        height,
    };
    line_chart(&chart, &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, d: usize, s: f64) -> MetricsSummary {
        MetricsSummary {
            strategy: strategy.into(),
            d,
            h: None,
            episodes: 1,
            success_rate: s,
            mean_ticks: 100.0 - 10.0 * s,
            boundary_j: 0.0,
            within_j: 0.0,
            mean_speed: 0.0,
            mean_accel: 0.0,
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(success_vs_delay(&[], 640, 420).is_err());
        assert!(kinematics_overlay(&[], 640, 420).is_err());
    }

    #[test]
    fn output_is_deterministic_and_has_one_line_per_strategy() {
        let rows = [row("a", 0, 1.0), row("a", 1, 0.5), row("b", 0, 0.9), row("b", 1, 0.8)];
        let a = success_vs_delay(&rows, 640, 420).unwrap();
        assert_eq!(a, success_vs_delay(&rows, 640, 420).unwrap());
        assert_eq!(a.matches("<polyline").count(), 2);
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn per_h_rows_are_skipped() {
        let mut r = row("a", 0, 1.0);
        r.h = Some(3);
        assert!(per_delay_series(&[r], |r| r.success_rate).is_empty());
    }

    #[test]
    fn non_finite_points_are_rejected() {
        let s = [Series {
            label: "x".into(),
            points: vec![(0.0, f64::NAN)],
        }];
        let chart = Chart {
            title: "t",
            x_label: "x",
            y_label: "y",
            width: 100,
            height: 100,
        };
        assert!(line_chart(&chart, &s).is_err());
    }
}
