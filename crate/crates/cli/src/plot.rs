//! SVG line charts drawn from run records and dimension traces.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Result};
use pcn::train::{DimRecord, RunRecord};
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 440);
const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Ok(());
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    let err = |e: &dyn std::fmt::Display| anyhow!("drawing {}: {e}", path.display());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(&e))?;
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// `accuracy.svg` and `params.svg` in `dir`.
pub fn run_charts(record: &RunRecord, dir: &Path) -> Result<()> {
    let pts = |f: &dyn Fn(&pcn::train::EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        record.epochs.iter().filter_map(|e| f(e).map(|v| (e.epoch as f64, v))).collect()
    };
    let mut acc = vec![
        Series { label: "train".into(), points: pts(&|e| Some(e.train_acc)) },
        Series { label: "test".into(), points: pts(&|e| Some(e.test_acc)) },
    ];
    let val = pts(&|e| e.val_acc);
    if !val.is_empty() {
        acc.push(Series { label: "val".into(), points: val });
    }
    line_chart(&dir.join("accuracy.svg"), &record.run_id, "epoch", "accuracy", &acc)?;
    let params = [Series {
        label: "trainable".into(),
        points: pts(&|e| Some(e.trainable_params as f64)),
    }];
    line_chart(&dir.join("params.svg"), &record.run_id, "epoch", "trainable parameters", &params)
}

/// Effective dimensionality per layer against epoch, or against width for
/// a width sweep.
pub fn dim_chart(rows: &[DimRecord], by_width: bool, path: &Path) -> Result<()> {
    let mut by_layer: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let x = if by_width { r.width } else { r.epoch } as f64;
        by_layer.entry(&r.layer).or_default().push((x, r.effective_dim as f64));
    }
    let mut series: Vec<Series> = by_layer
        .into_iter()
        .map(|(layer, points)| Series { label: layer.to_string(), points })
        .collect();
    if by_width {
        let widths: Vec<(f64, f64)> = rows.iter().map(|r| (r.width as f64, r.width as f64)).collect();
        series.push(Series { label: "width".into(), points: widths });
    }
    let x_label = if by_width { "width" } else { "epoch" };
    line_chart(path, "effective dimensionality", x_label, "dimensions", &series)
}
