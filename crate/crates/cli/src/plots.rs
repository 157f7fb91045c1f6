//! Static SVG renderings of the report data files.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use cxr_core::dataset::Label;
use cxr_core::metrics::{Curve, CurveKind, EvaluationReport, ScoreHistogram};
use cxr_core::retrieval::ProjectedPoint;
use plotters::prelude::*;

const SIZE: (u32, u32) = (640, 480);
const POSITIVE: RGBColor = RGBColor(200, 40, 40);
const NEGATIVE: RGBColor = RGBColor(40, 90, 200);

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

pub fn curve(path: &Path, title: &str, c: &Curve) -> Result<PathBuf> {
    let (xl, yl) = match c.kind {
        CurveKind::Roc => ("False positive rate", "True positive rate"),
        CurveKind::PrecisionRecall => ("Recall", "Precision"),
    };
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{title} (AUC {:.3})", c.auc), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..1f64, 0f64..1.02f64)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(xl).y_desc(yl).draw().map_err(plot_err)?;
    if c.kind == CurveKind::Roc {
        chart
            .draw_series(LineSeries::new([(0.0, 0.0), (1.0, 1.0)], &RGBColor(170, 170, 170)))
            .map_err(plot_err)?;
    }
    chart
        .draw_series(LineSeries::new(c.points.iter().copied(), NEGATIVE.stroke_width(2)))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path.to_path_buf())
}

pub fn histogram(path: &Path, title: &str, h: &ScoreHistogram) -> Result<PathBuf> {
    let top = h.positive.iter().chain(&h.negative).copied().max().unwrap_or(0).max(1) as f64;
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..1f64, 0f64..top * 1.1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("Score").y_desc("Images").draw().map_err(plot_err)?;
    for (counts, color, shift) in [(&h.negative, NEGATIVE, 0.0), (&h.positive, POSITIVE, 0.5)] {
        chart
            .draw_series(counts.iter().enumerate().map(|(i, &n)| {
                let (a, b) = (h.edges[i], h.edges[i + 1]);
                let w = (b - a) / 2.0;
                Rectangle::new([(a + shift * (b - a), 0.0), (a + shift * (b - a) + w, n as f64)], color.mix(0.8).filled())
            }))
            .map_err(plot_err)?
            .label(if shift == 0.0 { "negative" } else { "positive" })
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path.to_path_buf())
}

/// ROC, P-R and score histogram for one model as `<kind>_<stem>.svg`.
pub fn evaluation(dir: &Path, stem: &str, title: &str, r: &EvaluationReport) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if let Some(c) = &r.roc {
        out.push(curve(&dir.join(format!("roc_{stem}.svg")), &format!("ROC: {title}"), c)?);
    }
    if let Some(c) = &r.pr {
        out.push(curve(&dir.join(format!("pr_{stem}.svg")), &format!("P-R: {title}"), c)?);
    }
    out.push(histogram(&dir.join(format!("histogram_{stem}.svg")), &format!("Scores: {title}"), &r.histogram)?);
    Ok(out)
}

pub fn projection(path: &Path, points: &[ProjectedPoint]) -> Result<PathBuf> {
    let bounds = |i: usize| {
        let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.xy[i]), hi.max(p.xy[i])));
        if lo.is_finite() {
            let pad = ((hi - lo) * 0.05).max(1e-6);
            (lo - pad)..(hi + pad)
        } else {
            -1.0..1.0
        }
    };
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("t-SNE of embeddings", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(40)
        .build_cartesian_2d(bounds(0), bounds(1))
        .map_err(plot_err)?;
    chart.configure_mesh().disable_mesh().draw().map_err(plot_err)?;
    for (label, color) in [(Label::Negative, NEGATIVE), (Label::Positive, POSITIVE)] {
        chart
            .draw_series(
                points
                    .iter()
                    .filter(|p| p.label == label)
                    .map(|p| Circle::new((p.xy[0], p.xy[1]), 3, color.mix(0.8).filled())),
            )
            .map_err(plot_err)?
            .label(label.as_str())
            .legend(move |(x, y)| Circle::new((x + 5, y), 4, color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(path.to_path_buf())
}
