//! SVG figures for the commands.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn err(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow!("plot: {e}")
}

/// Epoch ELBO curve.
pub fn elbo_curve(elbo: &[f64], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (lo, hi) = range(elbo.iter().copied());
    let mut chart = ChartBuilder::on(&root)
        .caption("training ELBO", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..elbo.len().max(1) as f64, lo..hi)
        .map_err(err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("ELBO (nats)").draw().map_err(err)?;
    chart
        .draw_series(LineSeries::new(elbo.iter().enumerate().map(|(i, &v)| (i as f64 + 1.0, v)), &BLUE))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Per-dimension MI in ascending order, Concrete groups appended last in red.
pub fn mi_bars(normal: &[(String, f64)], concrete: &[(String, f64)], path: &Path) -> Result<()> {
    let mut sorted = normal.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let bars: Vec<(String, f64, bool)> = sorted
        .into_iter()
        .map(|(n, v)| (n, v, false))
        .chain(concrete.iter().cloned().map(|(n, v)| (n, v, true)))
        .collect();
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-3) * 1.1;
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption("I(x; z) per latent dimension", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..bars.len() as f64, 0f64..top)
        .map_err(err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(bars.len())
        .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
        .y_desc("nats")
        .draw()
        .map_err(err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v, concrete))| {
            let colour = if *concrete { RED } else { BLUE };
            Rectangle::new([(i as f64 + 0.1, 0.0), (i as f64 + 0.9, *v)], colour.filled())
        }))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Scatter of `(x, y)` points with axis labels.
pub fn scatter(points: &[(f64, f64)], title: &str, x_desc: &str, y_desc: &str, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let (x0, x1) = range(points.iter().map(|p| p.0));
    let (y0, y1) = range(points.iter().map(|p| p.1));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(err)?;
    chart
        .draw_series(points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()).map(|&p| Circle::new(p, 4, BLUE.filled())))
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

/// Overlaid histograms of a feature on training and held-out rows, with the threshold marked.
pub fn feature_histograms(train: &[f64], heldout: &[f64], threshold: f64, path: &Path) -> Result<()> {
    let bins = 30;
    let (lo, hi) = range(train.iter().chain(heldout).copied().chain(std::iter::once(threshold)));
    let width = (hi - lo) / bins as f64;
    let density = |xs: &[f64]| {
        let mut counts = vec![0.0; bins];
        for &x in xs {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1.0 / (xs.len().max(1) as f64 * width);
        }
        counts
    };
    let (dt, dh) = (density(train), density(heldout));
    let top = dt.iter().chain(&dh).copied().fold(0.0, f64::max).max(1e-6) * 1.1;
    let root = SVGBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("pruned feature: training (blue) vs held out (red)", ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(lo..hi, 0f64..top)
        .map_err(err)?;
    chart.configure_mesh().x_desc("inferred feature").y_desc("density").draw().map_err(err)?;
    for (counts, colour) in [(&dt, BLUE.mix(0.5)), (&dh, RED.mix(0.5))] {
        chart
            .draw_series(counts.iter().enumerate().map(|(b, &c)| {
                let x = lo + b as f64 * width;
                Rectangle::new([(x, 0.0), (x + width, c)], colour.filled())
            }))
            .map_err(err)?;
    }
    chart.draw_series(LineSeries::new([(threshold, 0.0), (threshold, top)], BLACK.stroke_width(2))).map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}
