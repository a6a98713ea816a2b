//! SVG line charts for probe curves and lambda sweeps.

use std::path::Path;

use anyhow::{anyhow, Result};
use iimap::probes::ProbeReport;
use iimap::training::LambdaRow;
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 480);

fn palette(i: usize) -> RGBColor {
    const COLORS: [RGBColor; 8] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
        RGBColor(227, 119, 194),
        RGBColor(127, 127, 127),
    ];
    COLORS[i % COLORS.len()]
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, y_range: (f64, f64), series: &[Series]) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| anyhow!("plotting {}: {e}", path.display());
    let (mut x0, mut x1) = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y_range.0..y_range.1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(&e))?;
    for (i, s) in series.iter().enumerate() {
        let color = palette(i);
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    if !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// One chart per concept: corrected accuracy against layer, one line per
/// checkpoint. Returns the written files.
pub fn probe_curves(report: &ProbeReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let curves = report.curves();
    let mut concepts: Vec<_> = curves.iter().map(|c| c.concept).collect();
    concepts.dedup();
    let mut written = Vec::new();
    for concept in concepts {
        let series: Vec<Series> = curves
            .iter()
            .filter(|c| c.concept == concept)
            .map(|c| Series {
                name: c.checkpoint.clone(),
                points: c.layers.iter().map(|&l| l as f64).zip(c.corrected_accuracy.iter().copied()).collect(),
            })
            .collect();
        let path = dir.join(format!("probe_{concept}.svg"));
        line_chart(&path, concept.name(), "layer", "corrected accuracy", (-1.0, 1.0), &series)?;
        written.push(path);
    }
    Ok(written)
}

/// Final mask density and held-out agreement against lambda.
pub fn sweep_chart(rows: &[LambdaRow], path: &Path) -> Result<()> {
    let series = [
        Series {
            name: "mean P".into(),
            points: rows.iter().map(|r| (r.lambda as f64, r.final_density)).collect(),
        },
        Series {
            name: "held-out agreement".into(),
            points: rows.iter().map(|r| (r.lambda as f64, r.heldout_agreement)).collect(),
        },
    ];
    line_chart(path, "lambda sweep", "lambda", "", (0.0, 1.0), &series)
}
