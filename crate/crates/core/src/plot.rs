//! SVG charts for replay traces and study reports.

use std::path::Path;

use plotters::prelude::*;

use crate::analysis::{EmpiricalCdf, RatAeCell};
use crate::harness::RunTrace;

pub type PlotResult = Result<(), String>;

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    if !(lo.is_finite() && hi.is_finite()) {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad)..(hi + pad)
}

/// Mean incumbent curves with a +-1 std band, one per tuner.
pub fn trace_chart(path: &Path, title: &str, traces: &[RunTrace]) -> PlotResult {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let budget = traces
        .iter()
        .map(|t| t.budget)
        .fold(0.0, f64::max)
        .max(1e-9);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in traces {
        for p in &t.aggregate {
            if let (Some(m), Some(s)) = (p.mean, p.std) {
                lo = lo.min(m - s);
                hi = hi.max(m + s);
            }
        }
    }
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..budget, padded(lo, hi))
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("simulated time (s)")
        .y_desc("objective")
        .draw()
        .map_err(err)?;
    for (k, t) in traces.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let defined: Vec<(f64, f64, f64)> = t
            .aggregate
            .iter()
            .filter_map(|p| Some((p.t, p.mean?, p.std?)))
            .collect();
        if defined.is_empty() {
            continue;
        }
        let mut band: Vec<(f64, f64)> = defined.iter().map(|&(x, m, s)| (x, m + s)).collect();
        band.extend(defined.iter().rev().map(|&(x, m, s)| (x, m - s)));
        chart
            .draw_series(std::iter::once(Polygon::new(band, color.mix(0.15))))
            .map_err(err)?;
        chart
            .draw_series(LineSeries::new(
                defined.iter().map(|&(x, m, _)| (x, m)),
                color.stroke_width(2),
            ))
            .map_err(err)?
            .label(t.label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

/// Scatter of `(x, y)` pairs with the identity line.
pub fn scatter_chart(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    points: &[(f64, f64)],
) -> PlotResult {
    let root = SVGBackend::new(path, (600, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let lo = points
        .iter()
        .map(|p| p.0.min(p.1))
        .fold(f64::INFINITY, f64::min);
    let hi = points
        .iter()
        .map(|p| p.0.max(p.1))
        .fold(f64::NEG_INFINITY, f64::max);
    let range = padded(lo, hi);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(range.clone(), range.clone())
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc(y_desc)
        .draw()
        .map_err(err)?;
    chart
        .draw_series(LineSeries::new(
            vec![(range.start, range.start), (range.end, range.end)],
            BLACK.mix(0.3),
        ))
        .map_err(err)?;
    chart
        .draw_series(
            points
                .iter()
                .map(|&(x, y)| Circle::new((x, y), 3, PALETTE[0].mix(0.6).filled())),
        )
        .map_err(err)?;
    root.present().map_err(err)
}

/// Step plots of empirical CDFs.
pub fn cdf_chart(
    path: &Path,
    title: &str,
    x_desc: &str,
    series: &[(String, &EmpiricalCdf)],
) -> PlotResult {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let lo = series
        .iter()
        .map(|s| s.1.min())
        .fold(f64::INFINITY, f64::min);
    let hi = series
        .iter()
        .map(|s| s.1.max())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(padded(lo, hi), 0.0..1.02)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("CDF")
        .draw()
        .map_err(err)?;
    for (k, (name, cdf)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts = Vec::new();
        let mut prev = 0.0;
        for (v, p) in cdf.steps() {
            pts.push((v, prev));
            pts.push((v, p));
            prev = p;
        }
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(err)?
            .label(name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

/// `%RAT` x `%AE` heatmap of the mean error, frontier cells starred.
pub fn rat_ae_heatmap(path: &Path, title: &str, cells: &[RatAeCell]) -> PlotResult {
    let mut rats: Vec<u8> = cells.iter().map(|c| c.rat_pct).collect();
    rats.sort_unstable();
    rats.dedup();
    let mut aes: Vec<u8> = cells.iter().map(|c| c.ae_pct).collect();
    aes.sort_unstable();
    aes.dedup();
    let root = SVGBackend::new(
        path,
        (120 + 90 * aes.len() as u32, 100 + 60 * rats.len() as u32),
    )
    .into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let values: Vec<f64> = cells
        .iter()
        .map(|c| 0.5 * (c.std_error + c.adv_error))
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0..aes.len(), 0..rats.len())
        .map_err(err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_desc("%AE")
        .y_desc("%RAT")
        .x_labels(aes.len())
        .y_labels(rats.len())
        .x_label_formatter(&|i| aes.get(*i).map_or(String::new(), |v| v.to_string()))
        .y_label_formatter(&|i| rats.get(*i).map_or(String::new(), |v| v.to_string()))
        .draw()
        .map_err(err)?;
    for (c, v) in cells.iter().zip(&values) {
        let xi = aes.binary_search(&c.ae_pct).unwrap_or(0);
        let yi = rats.binary_search(&c.rat_pct).unwrap_or(0);
        let shade = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
        let color = RGBColor(
            (255.0 * shade) as u8,
            (80.0 + 100.0 * (1.0 - shade)) as u8,
            (255.0 * (1.0 - shade)) as u8,
        );
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(xi, yi), (xi + 1, yi + 1)],
                color.filled(),
            )))
            .map_err(err)?;
        let label = if c.on_frontier {
            format!("*{v:.3}")
        } else {
            format!("{v:.3}")
        };
        chart
            .draw_series(std::iter::once(Text::new(
                label,
                (xi, yi + 1),
                ("sans-serif", 14).into_font().color(&WHITE),
            )))
            .map_err(err)?;
    }
    root.present().map_err(err)
}
