//! Minimal SVG line charts for the pipeline's reports.
//!
//! Hand-rolled on purpose: the two charts the toolkit emits — per-prefix
//! prediction traces and early-estimation curves — are plain line charts,
//! and a few `<polyline>` elements keep the toolchain hermetic. Rendering is
//! deterministic: identical inputs produce identical bytes.

use std::fmt::Write;

use crate::eval::BucketCurve;
use crate::models::PredictionTrace;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 64.0;
const MARGIN_TOP: f64 = 44.0;
const MARGIN_BOTTOM: f64 = 52.0;

const BLUE: &str = "#1f77b4";
const RED: &str = "#d62728";
const GRAY: &str = "#9b9b9b";

/// Maps data coordinates into the plot rectangle.
struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-9);
        MARGIN_LEFT + (x - self.x_min) / span * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-9);
        HEIGHT - MARGIN_BOTTOM - (y - self.y_min) / span * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

/// Number formatting for tick labels: two decimals with trailing zeros (and
/// a bare trailing dot) removed, so `1.00` renders as `1` and `0.50` as
/// `0.5`.
fn tick_label(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" { "0".to_string() } else { s.to_string() }
}

fn polyline(out: &mut String, frame: &Frame, points: &[(f64, f64)], color: &str, dashed: bool) {
    if points.is_empty() {
        return;
    }
    let dash = if dashed { " stroke-dasharray=\"5,4\"" } else { "" };
    let coords: Vec<String> =
        points.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y))).collect();
    let _ = writeln!(
        out,
        "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\" />",
        coords.join(" ")
    );
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, size: u32, color: &str, content: &str) {
    let _ = writeln!(
        out,
        "  <text x=\"{x:.2}\" y=\"{y:.2}\" text-anchor=\"{anchor}\" font-size=\"{size}\" \
         font-family=\"sans-serif\" fill=\"{color}\">{}</text>",
        escape(content)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open_svg(title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(out, "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\" />");
    text(&mut out, WIDTH / 2.0, MARGIN_TOP - 18.0, "middle", 15, "black", title);
    out
}

/// Axis line, ticks, and tick labels along the bottom of the plot.
fn x_axis(out: &mut String, frame: &Frame, ticks: &[f64], label: &str) {
    let y = HEIGHT - MARGIN_BOTTOM;
    let _ = writeln!(
        out,
        "  <line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"black\" />",
        MARGIN_LEFT,
        WIDTH - MARGIN_RIGHT
    );
    for &t in ticks {
        let x = frame.px(t);
        let _ = writeln!(
            out,
            "  <line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\" />",
            y + 5.0
        );
        text(out, x, y + 18.0, "middle", 11, "black", &tick_label(t));
    }
    text(out, (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0, HEIGHT - 14.0, "middle", 12, "black", label);
}

/// Axis line, ticks, and a rotated label on the left or right edge.
fn y_axis(out: &mut String, frame: &Frame, ticks: &[f64], label: &str, color: &str, right: bool) {
    let x = if right { WIDTH - MARGIN_RIGHT } else { MARGIN_LEFT };
    let _ = writeln!(
        out,
        "  <line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\" />",
        MARGIN_TOP,
        HEIGHT - MARGIN_BOTTOM
    );
    for &t in ticks {
        let y = frame.py(t);
        let (x2, lx, anchor) =
            if right { (x + 5.0, x + 9.0, "start") } else { (x - 5.0, x - 9.0, "end") };
        let _ = writeln!(
            out,
            "  <line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{x2:.2}\" y2=\"{y:.2}\" stroke=\"black\" />"
        );
        text(out, lx, y + 4.0, anchor, 11, "black", &tick_label(t));
    }
    let lx = if right { WIDTH - 14.0 } else { 16.0 };
    let ly = (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0;
    let deg = if right { 90 } else { -90 };
    let _ = writeln!(
        out,
        "  <text x=\"{lx:.2}\" y=\"{ly:.2}\" text-anchor=\"middle\" font-size=\"12\" \
         font-family=\"sans-serif\" fill=\"{color}\" transform=\"rotate({deg} {lx:.2} {ly:.2})\">{}</text>",
        escape(label)
    );
}

fn legend_entry(out: &mut String, slot: usize, color: &str, dashed: bool, label: &str) {
    let x = MARGIN_LEFT + 12.0;
    let y = MARGIN_TOP + 14.0 + 16.0 * slot as f64;
    let dash = if dashed { " stroke-dasharray=\"5,4\"" } else { "" };
    let _ = writeln!(
        out,
        "  <line x1=\"{x:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" \
         stroke-width=\"2\"{dash} />",
        x + 22.0
    );
    text(out, x + 28.0, y + 4.0, "start", 11, "black", label);
}

/// Render a per-prefix prediction trace: the mean escalation score with a
/// dashed ±1 standard-deviation envelope (clamped to [0, 1]) and a gray
/// reference line at 0.5, the decision threshold where inflection points
/// are read off.
pub fn trace_chart(trace: &PredictionTrace) -> String {
    let n = trace.entries.len().max(1);
    let frame = Frame { x_min: 1.0, x_max: n as f64, y_min: 0.0, y_max: 1.0 };
    let mut out = open_svg(&format!("Prediction trace: {}", trace.conversation_id));

    let mean: Vec<(f64, f64)> =
        trace.entries.iter().map(|e| (e.prefix_len as f64, e.mean)).collect();
    let upper: Vec<(f64, f64)> = trace
        .entries
        .iter()
        .map(|e| (e.prefix_len as f64, (e.mean + e.std).min(1.0)))
        .collect();
    let lower: Vec<(f64, f64)> = trace
        .entries
        .iter()
        .map(|e| (e.prefix_len as f64, (e.mean - e.std).max(0.0)))
        .collect();

    let threshold = frame.py(0.5);
    let _ = writeln!(
        out,
        "  <line x1=\"{:.2}\" y1=\"{threshold:.2}\" x2=\"{:.2}\" y2=\"{threshold:.2}\" \
         stroke=\"{GRAY}\" stroke-dasharray=\"2,3\" />",
        MARGIN_LEFT,
        WIDTH - MARGIN_RIGHT
    );
    polyline(&mut out, &frame, &upper, GRAY, true);
    polyline(&mut out, &frame, &lower, GRAY, true);
    polyline(&mut out, &frame, &mean, BLUE, false);

    // Up to ten integer ticks, stepped so long conversations stay readable.
    let step = (n as f64 / 10.0).ceil().max(1.0) as usize;
    let ticks: Vec<f64> = (1..=n).filter(|k| k % step == 0 || *k == 1 || *k == n).map(|k| k as f64).collect();
    x_axis(&mut out, &frame, &ticks, "utterances observed");
    y_axis(&mut out, &frame, &[0.0, 0.25, 0.5, 0.75, 1.0], "P(escalation)", "black", false);
    legend_entry(&mut out, 0, BLUE, false, "mean");
    legend_entry(&mut out, 1, GRAY, true, "mean \u{b1} std");
    out.push_str("</svg>\n");
    out
}

/// Render an early-estimation curve with two y-axes: PR-AUC of the mean
/// scores on the left and mean predictive uncertainty on the right, both
/// against the fraction of each conversation observed.
pub fn early_eval_chart(curve: &BucketCurve) -> String {
    let frame = Frame { x_min: 0.1, x_max: 1.0, y_min: 0.0, y_max: 1.0 };
    let max_unc = curve
        .points
        .iter()
        .map(|p| p.mean_uncertainty)
        .fold(0.0_f64, f64::max)
        .max(1e-6);
    // Headroom above the largest uncertainty so the curve stays inside the
    // frame; the right axis is scaled independently of the left.
    let unc_top = max_unc * 1.15;
    let unc_frame = Frame { x_min: 0.1, x_max: 1.0, y_min: 0.0, y_max: unc_top };

    let mut out = open_svg("Early estimation: performance and uncertainty");
    let auc: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fraction, p.pr_auc)).collect();
    let unc: Vec<(f64, f64)> =
        curve.points.iter().map(|p| (p.fraction, p.mean_uncertainty)).collect();

    polyline(&mut out, &frame, &auc, BLUE, false);
    polyline(&mut out, &unc_frame, &unc, RED, true);

    let ticks: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    x_axis(&mut out, &frame, &ticks, "fraction of conversation observed");
    y_axis(&mut out, &frame, &[0.0, 0.25, 0.5, 0.75, 1.0], "PR-AUC", BLUE, false);
    let unc_ticks: Vec<f64> = (0..=4).map(|i| unc_top * i as f64 / 4.0).collect();
    y_axis(&mut out, &unc_frame, &unc_ticks, "mean uncertainty", RED, true);
    legend_entry(&mut out, 0, BLUE, false, "PR-AUC");
    legend_entry(&mut out, 1, RED, true, "uncertainty");
    out.push_str("</svg>\n");
    out
}
