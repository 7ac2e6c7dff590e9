//! Figure rendering: information-plane curves, per-tap MI trajectories,
//! training-loss curves (SVG via plotters), and conditional sample grids
//! (PNG montages). Output is a pure function of the inputs: fixed styling,
//! no timestamps, so figures regenerate byte-identically.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array3;
use plotters::prelude::*;

use crate::encoder::{EpochMetrics, Tap};
use crate::error::{Error, Result};
use crate::mi::{Direction, Estimator, MIRecord};

const FIGURE_SIZE: (u32, u32) = (820, 620);

fn tap_base_color(tap: Tap) -> (u8, u8, u8) {
    match tap {
        Tap::H1 => (31, 119, 180),
        Tap::H2 => (255, 127, 14),
        Tap::H3 => (44, 160, 44),
        Tap::H4 => (214, 39, 40),
    }
}

/// Faint→dark ramp: early epochs washed out, late epochs saturated.
fn ramp(base: (u8, u8, u8), position: f64) -> RGBColor {
    let t = 0.15 + 0.85 * position.clamp(0.0, 1.0);
    let mix = |c: u8| (255.0 - (255.0 - c as f64) * t) as u8;
    RGBColor(mix(base.0), mix(base.1), mix(base.2))
}

fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-6);
    (lo - pad, hi + pad)
}

fn inverse_estimator_of(records: &[MIRecord]) -> Result<Estimator> {
    let kinds: BTreeSet<String> = records
        .iter()
        .filter(|r| r.direction == Direction::Inverse)
        .map(|r| r.estimator.to_string())
        .collect();
    match kinds.len() {
        0 => Err(Error::Plot("no inverse-direction records to plot".into())),
        1 => kinds.iter().next().unwrap().parse(),
        _ => Err(Error::MixedEstimators(format!(
            "one figure takes one inverse estimator, found {kinds:?}"
        ))),
    }
}

/// The information plane: x = inverse bound, y = forward bound, one
/// polyline per tap ordered by epoch with a faint→dark colour ramp. The
/// record slice must contain exactly one inverse estimator kind.
pub fn render_info_plane(records: &[MIRecord], out: &Path) -> Result<()> {
    let inverse_kind = inverse_estimator_of(records)?;
    let taps: BTreeSet<Tap> = records.iter().map(|r| r.tap).collect();

    // (tap, epoch) pairs with both directions present
    let mut series: Vec<(Tap, Vec<(usize, f64, f64)>)> = Vec::new();
    for &tap in &taps {
        let mut points = Vec::new();
        let epochs: BTreeSet<usize> = records
            .iter()
            .filter(|r| r.tap == tap)
            .map(|r| r.epoch)
            .collect();
        for &epoch in &epochs {
            let inv = records.iter().find(|r| {
                r.tap == tap && r.epoch == epoch && r.estimator == inverse_kind
            });
            let fwd = records.iter().find(|r| {
                r.tap == tap && r.epoch == epoch && r.estimator == Estimator::ForwardDecoder
            });
            if let (Some(inv), Some(fwd)) = (inv, fwd) {
                points.push((epoch, inv.value_nats, fwd.value_nats));
            }
        }
        if !points.is_empty() {
            series.push((tap, points));
        }
    }
    if series.is_empty() {
        return Err(Error::Plot("no (tap, epoch) pair has both directions".into()));
    }

    let x_label = match inverse_kind {
        Estimator::InverseRelative => "I(x; h) nats (relative)",
        _ => "I(x; h) nats",
    };
    let (x_lo, x_hi) = axis_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let (y_lo, y_hi) = axis_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.2)));

    let root = SVGBackend::new(out, FIGURE_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| Error::Plot(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(18)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .caption("Information plane", ("sans-serif", 22))
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
        .map_err(|e| Error::Plot(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc("I(y; h) nats")
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;

    for (tap, points) in &series {
        let base = tap_base_color(*tap);
        let max_idx = (points.len() - 1).max(1) as f64;
        chart
            .draw_series(LineSeries::new(
                points.iter().map(|(_, x, y)| (*x, *y)),
                ramp(base, 0.6).stroke_width(2),
            ))
            .map_err(|e| Error::Plot(e.to_string()))?
            .label(tap.to_string())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], ramp(base, 0.6).stroke_width(2))
            });
        chart
            .draw_series(points.iter().enumerate().map(|(i, (_, x, y))| {
                Circle::new((*x, *y), 4, ramp(base, i as f64 / max_idx).filled())
            }))
            .map_err(|e| Error::Plot(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;
    root.present().map_err(|e| Error::Plot(e.to_string()))?;
    Ok(())
}

/// MI value against encoder epoch, one line per tap, for one estimator.
pub fn render_mi_curves(records: &[MIRecord], estimator: Estimator, out: &Path) -> Result<()> {
    let filtered: Vec<&MIRecord> = records.iter().filter(|r| r.estimator == estimator).collect();
    if filtered.is_empty() {
        return Err(Error::Plot(format!("no records for estimator {estimator}")));
    }
    let taps: BTreeSet<Tap> = filtered.iter().map(|r| r.tap).collect();
    let (x_lo, x_hi) = axis_range(filtered.iter().map(|r| r.epoch as f64));
    let (y_lo, y_hi) = axis_range(filtered.iter().map(|r| r.value_nats));

    let root = SVGBackend::new(out, FIGURE_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| Error::Plot(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(18)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .caption(format!("MI tracking ({estimator})"), ("sans-serif", 22))
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
        .map_err(|e| Error::Plot(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("encoder epoch")
        .y_desc("nats")
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;

    for &tap in &taps {
        let mut points: Vec<(f64, f64)> = filtered
            .iter()
            .filter(|r| r.tap == tap)
            .map(|r| (r.epoch as f64, r.value_nats))
            .collect();
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let base = tap_base_color(tap);
        chart
            .draw_series(LineSeries::new(points.clone(), ramp(base, 0.7).stroke_width(2)))
            .map_err(|e| Error::Plot(e.to_string()))?
            .label(tap.to_string())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 16, y)], ramp(base, 0.7).stroke_width(2))
            });
        chart
            .draw_series(points.iter().map(|(x, y)| Circle::new((*x, *y), 3, ramp(base, 0.9).filled())))
            .map_err(|e| Error::Plot(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;
    root.present().map_err(|e| Error::Plot(e.to_string()))?;
    Ok(())
}

/// Encoder training loss (and accuracy when present) against epoch.
pub fn render_loss_curves(metrics: &[EpochMetrics], out: &Path) -> Result<()> {
    if metrics.is_empty() {
        return Err(Error::Plot("no training metrics to plot".into()));
    }
    let (x_lo, x_hi) = axis_range(metrics.iter().map(|m| m.epoch as f64));
    let (y_lo, y_hi) = axis_range(metrics.iter().map(|m| m.loss));

    let root = SVGBackend::new(out, FIGURE_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| Error::Plot(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(18)
        .x_label_area_size(44)
        .y_label_area_size(56)
        .caption("Training loss", ("sans-serif", 22))
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
        .map_err(|e| Error::Plot(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(|e| Error::Plot(e.to_string()))?;
    chart
        .draw_series(LineSeries::new(
            metrics.iter().map(|m| (m.epoch as f64, m.loss)),
            RGBColor(31, 119, 180).stroke_width(2),
        ))
        .map_err(|e| Error::Plot(e.to_string()))?;
    root.present().map_err(|e| Error::Plot(e.to_string()))?;
    Ok(())
}

/// Compose a sample grid PNG: one row per source image; the first column
/// holds the originals, later columns one sampled image per conditioning
/// checkpoint. `columns` supplies (label, images) pairs in display order.
pub fn sample_grid(
    originals: &[Array3<u8>],
    columns: &[(String, Vec<Array3<u8>>)],
    scale: usize,
    out: &Path,
) -> Result<()> {
    if originals.is_empty() {
        return Err(Error::Plot("sample grid needs at least one source image".into()));
    }
    for (label, imgs) in columns {
        if imgs.len() != originals.len() {
            return Err(Error::Plot(format!(
                "column `{label}` has {} images for {} rows",
                imgs.len(),
                originals.len()
            )));
        }
    }
    let (c, h, w) = originals[0].dim();
    if c != 3 {
        return Err(Error::Plot("sample grid expects RGB images".into()));
    }
    let scale = scale.max(1);
    let gap = 2usize;
    let rows = originals.len();
    let cols = 1 + columns.len();
    let tile_h = h * scale;
    let tile_w = w * scale;
    let total_h = rows * tile_h + (rows + 1) * gap;
    let total_w = cols * tile_w + (cols + 1) * gap;
    let mut canvas = image::RgbImage::from_pixel(total_w as u32, total_h as u32, image::Rgb([255, 255, 255]));

    let mut blit = |row: usize, col: usize, img: &Array3<u8>| {
        let y0 = gap + row * (tile_h + gap);
        let x0 = gap + col * (tile_w + gap);
        for i in 0..h {
            for j in 0..w {
                let px = image::Rgb([img[(0, i, j)], img[(1, i, j)], img[(2, i, j)]]);
                for di in 0..scale {
                    for dj in 0..scale {
                        canvas.put_pixel((x0 + j * scale + dj) as u32, (y0 + i * scale + di) as u32, px);
                    }
                }
            }
        }
    };

    for (row, img) in originals.iter().enumerate() {
        blit(row, 0, img);
    }
    for (col, (_, imgs)) in columns.iter().enumerate() {
        for (row, img) in imgs.iter().enumerate() {
            blit(row, col + 1, img);
        }
    }
    canvas
        .save(out)
        .map_err(|e| Error::Plot(format!("writing {}: {e}", out.display())))?;
    Ok(())
}

/// Expected pixel dimensions of a grid, for callers that validate output.
pub fn grid_dimensions(rows: usize, conditioning_columns: usize, image_px: usize, scale: usize) -> (usize, usize) {
    let gap = 2usize;
    let cols = 1 + conditioning_columns;
    let tile = image_px * scale.max(1);
    (cols * tile + (cols + 1) * gap, rows * tile + (rows + 1) * gap)
}
