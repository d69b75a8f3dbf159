//! Static SVG 1.1 line charts: reconstruction profiles, optimization
//! histories, and log-log sweep plots. Output is a pure function of the
//! input data, so regenerating a plot from the same numbers reproduces
//! the same bytes.

use std::fmt::Write as _;

use crate::coeff::PiecewiseConstantBoundaryCoefficient;
use crate::experiment::RateEstimate;
use crate::inversion::HistoryRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 616.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 420.0;

// Data-to-pixel mapping over the fixed plot frame, linear or decadic on
// each axis independently.
struct Axes {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    log_x: bool,
    log_y: bool,
}

impl Axes {
    fn new(
        xs: impl Iterator<Item = f64>,
        ys: impl Iterator<Item = f64>,
        log_x: bool,
        log_y: bool,
    ) -> Option<Axes> {
        let mut x_min = f64::INFINITY;
        let mut x_max = f64::NEG_INFINITY;
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        for x in xs {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
        }
        for y in ys {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        if !(x_min.is_finite() && x_max.is_finite() && y_min.is_finite() && y_max.is_finite()) {
            return None;
        }
        let mut axes = Axes { x_min, x_max, y_min, y_max, log_x, log_y };
        axes.pad();
        Some(axes)
    }

    fn pad(&mut self) {
        if self.log_x {
            if self.x_min == self.x_max {
                self.x_min /= 2.0;
                self.x_max *= 2.0;
            }
        } else if self.x_min == self.x_max {
            self.x_min -= 0.5;
            self.x_max += 0.5;
        }
        if self.log_y {
            if self.y_min == self.y_max {
                self.y_min /= 2.0;
                self.y_max *= 2.0;
            }
        } else {
            let span = self.y_max - self.y_min;
            let pad = if span == 0.0 { 0.5 } else { 0.1 * span };
            self.y_min -= pad;
            self.y_max += pad;
        }
    }

    fn tx(&self, x: f64) -> f64 {
        let (a, b, v) = if self.log_x {
            (self.x_min.log10(), self.x_max.log10(), x.log10())
        } else {
            (self.x_min, self.x_max, x)
        };
        LEFT + (v - a) / (b - a) * (RIGHT - LEFT)
    }

    fn ty(&self, y: f64) -> f64 {
        let (a, b, v) = if self.log_y {
            (self.y_min.log10(), self.y_max.log10(), y.log10())
        } else {
            (self.y_min, self.y_max, y)
        };
        BOTTOM - (v - a) / (b - a) * (BOTTOM - TOP)
    }

    fn x_ticks(&self) -> Vec<f64> {
        ticks(self.x_min, self.x_max, self.log_x)
    }

    fn y_ticks(&self) -> Vec<f64> {
        ticks(self.y_min, self.y_max, self.log_y)
    }
}

fn ticks(min: f64, max: f64, log: bool) -> Vec<f64> {
    if log {
        let lo = min.log10().ceil() as i32;
        let hi = max.log10().floor() as i32;
        if lo > hi {
            return vec![min, max];
        }
        (lo..=hi).map(|p| 10f64.powi(p)).collect()
    } else {
        (0..=4).map(|k| min + k as f64 * (max - min) / 4.0).collect()
    }
}

fn tick_label(v: f64, log: bool) -> String {
    if log || (v != 0.0 && v.abs() < 1e-3) || v.abs() >= 1e4 {
        format!("{v:.0e}")
    } else {
        format!("{v:.3}")
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" viewBox=\"0 0 {WIDTH:.0} {HEIGHT:.0}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" fill=\"white\"/>\n\
         <text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>\n",
        0.5 * (LEFT + RIGHT)
    );
}

fn draw_frame(out: &mut String, axes: &Axes, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        "<rect x=\"{LEFT:.2}\" y=\"{TOP:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n",
        RIGHT - LEFT,
        BOTTOM - TOP
    );
    for t in axes.x_ticks() {
        let px = axes.tx(t);
        if !(LEFT - 0.5..=RIGHT + 0.5).contains(&px) {
            continue;
        }
        let _ = write!(
            out,
            "<line x1=\"{px:.2}\" y1=\"{BOTTOM:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#333333\" stroke-width=\"1\"/>\n\
             <text x=\"{px:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            BOTTOM + 6.0,
            BOTTOM + 20.0,
            tick_label(t, axes.log_x)
        );
    }
    for t in axes.y_ticks() {
        let py = axes.ty(t);
        if !(TOP - 0.5..=BOTTOM + 0.5).contains(&py) {
            continue;
        }
        let _ = write!(
            out,
            "<line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{LEFT:.2}\" y2=\"{py:.2}\" stroke=\"#333333\" stroke-width=\"1\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            LEFT - 6.0,
            LEFT - 9.0,
            py + 4.0,
            tick_label(t, axes.log_y)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"18\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">{y_label}</text>\n",
        0.5 * (LEFT + RIGHT),
        HEIGHT - 14.0,
        0.5 * (TOP + BOTTOM),
        0.5 * (TOP + BOTTOM)
    );
}

fn polyline(out: &mut String, axes: &Axes, points: &[(f64, f64)], color: &str, dash: Option<&str>) {
    if points.is_empty() {
        return;
    }
    let dash_attr =
        dash.map(|d| format!(" stroke-dasharray=\"{d}\"")).unwrap_or_default();
    let mut coords = String::new();
    for (x, y) in points {
        let _ = write!(coords, "{:.2},{:.2} ", axes.tx(*x), axes.ty(*y));
    }
    let _ = write!(
        out,
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"{dash_attr} points=\"{}\"/>\n",
        coords.trim_end()
    );
}

fn legend(out: &mut String, entries: &[(&str, &str)]) {
    for (i, (color, label)) in entries.iter().enumerate() {
        let y = TOP + 16.0 + 18.0 * i as f64;
        let _ = write!(
            out,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">{label}</text>\n",
            LEFT + 10.0,
            LEFT + 34.0,
            LEFT + 40.0,
            y + 4.0
        );
    }
}

// Step-function sample: both endpoints of every piece.
fn step_points(q: &PiecewiseConstantBoundaryCoefficient) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(2 * q.values.len());
    let knots = q.knots();
    for (i, v) in q.values.iter().enumerate() {
        pts.push((knots[i], *v));
        pts.push((knots[i + 1], *v));
    }
    pts
}

/// Reconstruction profile chart: exactly two step polylines, the
/// recovered coefficient and the exact one, over arclength.
pub fn reconstruction_svg(
    q_star: &PiecewiseConstantBoundaryCoefficient,
    q_dag: &PiecewiseConstantBoundaryCoefficient,
) -> String {
    let star = step_points(q_star);
    let dag = step_points(q_dag);
    let axes = Axes::new(
        star.iter().chain(dag.iter()).map(|p| p.0),
        star.iter().chain(dag.iter()).map(|p| p.1),
        false,
        false,
    )
    .expect("step points of a valid coefficient are finite");
    let mut out = String::new();
    svg_open(&mut out, "Reconstructed coefficient");
    draw_frame(&mut out, &axes, "arclength s", "q(s)");
    polyline(&mut out, &axes, &dag, "#d62728", Some("6 4"));
    polyline(&mut out, &axes, &star, "#1f77b4", None);
    legend(&mut out, &[("#1f77b4", "recovered"), ("#d62728", "exact")]);
    out.push_str("</svg>\n");
    out
}

/// Optimization history chart: objective value per iteration on a log
/// scale, with the relative error as a second curve when recorded. An
/// empty history yields an axes-only chart.
pub fn history_svg(rows: &[HistoryRow]) -> String {
    let j_pts: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.j > 0.0).map(|r| (r.k as f64, r.j)).collect();
    let e_pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.e_q.filter(|e| *e > 0.0).map(|e| (r.k as f64, e)))
        .collect();
    let mut out = String::new();
    svg_open(&mut out, "Optimization history");
    let all = || j_pts.iter().chain(e_pts.iter());
    match Axes::new(all().map(|p| p.0), all().map(|p| p.1), false, true) {
        Some(axes) => {
            draw_frame(&mut out, &axes, "iteration k", "value");
            polyline(&mut out, &axes, &j_pts, "#1f77b4", None);
            polyline(&mut out, &axes, &e_pts, "#d62728", None);
            let mut entries = vec![("#1f77b4", "J")];
            if !e_pts.is_empty() {
                entries.push(("#d62728", "e_q"));
            }
            legend(&mut out, &entries);
        }
        None => {
            let axes =
                Axes { x_min: 0.0, x_max: 1.0, y_min: 0.1, y_max: 1.0, log_x: false, log_y: true };
            draw_frame(&mut out, &axes, "iteration k", "value");
        }
    }
    out.push_str("</svg>\n");
    out
}

/// The slope annotation on sweep charts; shared with callers that print
/// the fitted rate so the chart and the report always agree.
pub fn slope_annotation(rate: &RateEstimate) -> String {
    format!("slope {:.2}", rate.slope)
}

/// Log-log chart of median reconstruction error against noise level,
/// annotated with the fitted slope when one is available.
pub fn sweep_svg(medians: &[(f64, f64)], rate: Option<&RateEstimate>) -> String {
    let pts: Vec<(f64, f64)> =
        medians.iter().copied().filter(|(d, e)| *d > 0.0 && *e > 0.0).collect();
    let mut out = String::new();
    svg_open(&mut out, "Error versus noise level");
    match Axes::new(pts.iter().map(|p| p.0), pts.iter().map(|p| p.1), true, true) {
        Some(axes) => {
            draw_frame(&mut out, &axes, "noise level", "median e_q");
            let mut sorted = pts.clone();
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            polyline(&mut out, &axes, &sorted, "#1f77b4", None);
            for (d, e) in &sorted {
                let _ = write!(
                    out,
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f77b4\"/>\n",
                    axes.tx(*d),
                    axes.ty(*e)
                );
            }
            if let Some(rate) = rate {
                let _ = write!(
                    out,
                    "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
                    LEFT + 10.0,
                    TOP + 16.0,
                    slope_annotation(rate)
                );
            }
        }
        None => {
            let axes = Axes {
                x_min: 1e-3,
                x_max: 1e-2,
                y_min: 1e-3,
                y_max: 1e-1,
                log_x: true,
                log_y: true,
            };
            draw_frame(&mut out, &axes, "noise level", "median e_q");
        }
    }
    out.push_str("</svg>\n");
    out
}
