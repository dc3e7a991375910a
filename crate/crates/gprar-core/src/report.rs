//! Deterministic SVG line plots.
//!
//! Everything here is plain string assembly: fixed canvas, fixed margins, a
//! fixed palette, and numeric formatting with a fixed precision, so rendering
//! the same data twice yields byte-identical files that can be diffed against
//! golden copies.

use std::path::Path;

use crate::train::{Split, TrainReport};
use crate::{Error, Result};

/// One labelled polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl PlotSeries {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;
const TICKS: usize = 5;
/// Marker circles are drawn only for short series; long curves stay clean.
const MARKER_LIMIT: usize = 24;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Renders labelled series as an SVG line chart with axes and a legend.
/// Errors when there is no finite point to plot.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[PlotSeries]) -> Result<String> {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::Config("nothing to plot: every series is empty".into()));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("plot input contains a non-finite coordinate".into()));
    }
    let (x_min, x_max) = padded_range(points.iter().map(|p| p.0));
    let (y_min, y_max) = padded_range(points.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT);
    let sy = |y: f64| {
        HEIGHT - MARGIN_BOTTOM - (y - y_min) / (y_max - y_min) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!("<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"));

    // Grid and tick labels.
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let xv = x_min + f * (x_max - x_min);
        let yv = y_min + f * (y_max - y_min);
        let (gx, gy) = (coord(sx(xv)), coord(sy(yv)));
        svg.push_str(&format!(
            "<line x1=\"{gx}\" y1=\"{}\" x2=\"{gx}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            coord(sy(y_min)),
            coord(sy(y_max)),
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{gy}\" x2=\"{}\" y2=\"{gy}\" stroke=\"#dddddd\"/>\n",
            coord(sx(x_min)),
            coord(sx(x_max)),
        ));
        svg.push_str(&format!(
            "<text x=\"{gx}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            coord(HEIGHT - MARGIN_BOTTOM + 16.0),
            tick(xv),
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            coord(MARGIN_LEFT - 6.0),
            coord(sy(yv) + 4.0),
            tick(yv),
        ));
    }

    // Axes.
    svg.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n",
        coord(MARGIN_LEFT),
        coord(MARGIN_TOP),
        coord(WIDTH - MARGIN_LEFT - MARGIN_RIGHT),
        coord(HEIGHT - MARGIN_TOP - MARGIN_BOTTOM),
    ));

    // Series.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.len() > 1 {
            let pts: Vec<String> =
                s.points.iter().map(|&(x, y)| format!("{},{}", coord(sx(x)), coord(sy(y)))).collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" "),
            ));
        }
        if s.points.len() <= MARKER_LIMIT {
            for &(x, y) in &s.points {
                svg.push_str(&format!(
                    "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                    coord(sx(x)),
                    coord(sy(y)),
                ));
            }
        }
    }

    // Legend, top-right inside the plot area.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_TOP + 14.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN_RIGHT - 150.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            coord(x),
            coord(y - 4.0),
            coord(x + 18.0),
            coord(y - 4.0),
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            coord(x + 24.0),
            coord(y),
            escape(&s.label),
        ));
    }

    // Titles.
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        coord(WIDTH / 2.0),
        escape(title),
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        coord(WIDTH / 2.0),
        coord(HEIGHT - 12.0),
        escape(x_label),
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        coord(HEIGHT / 2.0),
        coord(HEIGHT / 2.0),
        escape(y_label),
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders and writes a line chart in one step.
pub fn save_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[PlotSeries],
) -> Result<()> {
    std::fs::write(path, line_plot(title, x_label, y_label, series)?)?;
    Ok(())
}

/// One series per tracked column and split, in column-major order, so the
/// optimized loss comes first and train/val pairs share adjacent colors.
pub fn curve_series(report: &TrainReport) -> Vec<PlotSeries> {
    let mut series = Vec::new();
    for (ci, column) in report.columns.iter().enumerate() {
        for split in [Split::Train, Split::Val] {
            let points: Vec<(f64, f64)> = report
                .curve
                .iter()
                .filter(|r| r.split == split)
                .map(|r| (r.epoch as f64, r.values[ci]))
                .collect();
            if !points.is_empty() {
                series.push(PlotSeries::new(format!("{} {}", split.name(), column), points));
            }
        }
    }
    series
}

/// Writes the loss-curve chart for a training report.
pub fn save_curve_plot(report: &TrainReport, path: &Path) -> Result<()> {
    save_line_plot(path, "training loss", "epoch", "mean loss", &curve_series(report))
}

/// Expands a degenerate range and pads a real one so curves sit off the frame.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if min == max {
        (min - 0.5, max + 0.5)
    } else {
        let pad = 0.04 * (max - min);
        (min - pad, max + pad)
    }
}

/// Screen coordinate with fixed precision (keeps output byte-stable).
fn coord(v: f64) -> String {
    format!("{v:.2}")
}

/// Tick label: fixed precision with trailing zeros trimmed.
fn tick(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::CurveRow;

    fn sample_series() -> Vec<PlotSeries> {
        vec![
            PlotSeries::new("alpha", vec![(0.0, 1.0), (0.25, 0.5), (0.5, 0.75)]),
            PlotSeries::new("beta", vec![(0.0, 1.2), (0.25, 1.1), (0.5, 1.15)]),
        ]
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = line_plot("t", "x", "y", &sample_series()).unwrap();
        let b = line_plot("t", "x", "y", &sample_series()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chart_contains_every_series_and_label() {
        let svg = line_plot("demo", "ratio", "ade", &sample_series()).unwrap();
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        for label in ["alpha", "beta", "demo", "ratio", "ade"] {
            assert!(svg.contains(label), "missing {label}");
        }
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn single_point_series_render_as_markers() {
        let svg = line_plot("t", "x", "y", &[PlotSeries::new("dot", vec![(1.0, 2.0)])]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 0);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(line_plot("t", "x", "y", &[]).is_err());
        assert!(line_plot("t", "x", "y", &[PlotSeries::new("e", vec![])]).is_err());
    }

    #[test]
    fn non_finite_points_are_rejected() {
        let bad = vec![PlotSeries::new("bad", vec![(0.0, f64::NAN)])];
        assert!(line_plot("t", "x", "y", &bad).is_err());
    }

    #[test]
    fn labels_are_escaped() {
        let series = vec![PlotSeries::new("a<b>&c", vec![(0.0, 0.0), (1.0, 1.0)])];
        let svg = line_plot("t", "x", "y", &series).unwrap();
        assert!(svg.contains("a&lt;b&gt;&amp;c"));
    }

    #[test]
    fn curve_series_pairs_columns_with_splits() {
        let report = TrainReport {
            columns: vec!["L".into(), "L_r".into()],
            curve: vec![
                CurveRow { epoch: 0, split: Split::Train, values: vec![1.0, 0.5] },
                CurveRow { epoch: 0, split: Split::Val, values: vec![1.1, 0.6] },
                CurveRow { epoch: 1, split: Split::Train, values: vec![0.8, 0.4] },
                CurveRow { epoch: 1, split: Split::Val, values: vec![0.9, 0.5] },
            ],
            best_epoch: Some(1),
        };
        let series = curve_series(&report);
        let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, ["train L", "val L", "train L_r", "val L_r"]);
        assert_eq!(series[0].points, vec![(0.0, 1.0), (1.0, 0.8)]);
        assert_eq!(series[3].points, vec![(0.0, 0.6), (1.0, 0.5)]);
    }
}
