//! Static SVG line plots.

use std::path::Path;

use plotters::prelude::*;

use crate::{CliError, Result};

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Plot `log10(y)`; non-positive values are dropped.
    pub log_y: bool,
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5_f64.max(lo.abs() * 0.05) };
    (lo - pad, hi + pad)
}

impl LinePlot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            log_y: false,
        }
    }

    pub fn log_y(mut self) -> Self {
        self.log_y = true;
        self
    }

    pub fn push(&mut self, series: Series) {
        self.series.push(series);
    }

    fn cleaned(&self) -> Vec<(String, Vec<(f64, f64)>)> {
        self.series
            .iter()
            .map(|s| {
                let pts = s
                    .points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_y || *y > 0.0))
                    .map(|&(x, y)| (x, if self.log_y { y.log10() } else { y }))
                    .collect();
                (s.label.clone(), pts)
            })
            .collect()
    }

    /// Renders to an SVG document.
    pub fn to_svg(&self) -> Result<String> {
        let data = self.cleaned();
        let (x0, x1) = bounds(data.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
        let (y0, y1) = bounds(data.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
        let mut svg = String::new();
        {
            let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
            let err = |e: &dyn std::fmt::Display| CliError::Runtime(format!("plot `{}`: {e}", self.title));
            root.fill(&WHITE).map_err(|e| err(&e))?;
            let y_label = if self.log_y {
                format!("log10 {}", self.y_label)
            } else {
                self.y_label.clone()
            };
            let mut chart = ChartBuilder::on(&root)
                .caption(&self.title, ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(40)
                .y_label_area_size(60)
                .build_cartesian_2d(x0..x1, y0..y1)
                .map_err(|e| err(&e))?;
            chart
                .configure_mesh()
                .x_desc(self.x_label.as_str())
                .y_desc(y_label.as_str())
                .draw()
                .map_err(|e| err(&e))?;
            let labelled = data.len() <= 12;
            for (i, (label, pts)) in data.into_iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                let drawn = chart
                    .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                    .map_err(|e| err(&e))?;
                if labelled {
                    drawn
                        .label(label)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
                }
            }
            if labelled && !self.series.is_empty() {
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.8))
                    .border_style(BLACK)
                    .draw()
                    .map_err(|e| err(&e))?;
            }
            root.present().map_err(|e| err(&e))?;
        }
        Ok(svg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::bundle::write_atomic(path, self.to_svg()?.as_bytes())
    }
}
