//! Static SVG figures.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::data::Quartiles;
use plotters::prelude::*;

use super::{EvalReport, RobustnessRow};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

/// One box per class over all records of the report.
pub fn plot_dice_boxplot(report: &EvalReport, title: &str, path: &Path) -> Result<()> {
    let mut by_class: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &report.records {
        for (c, &d) in &r.dice {
            by_class.entry(c).or_default().push(d);
        }
    }
    if by_class.is_empty() {
        return Err(Error::Contract("no records to plot".into()));
    }
    let names: Vec<&str> = by_class.keys().copied().collect();
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (160 + 110 * names.len() as u32, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d((0..names.len() as i32).into_segmented(), 0f32..1.05f32)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .y_desc("Dice")
            .x_label_formatter(&|v| match v {
                SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => names.get(*i as usize).map_or(String::new(), |s| s.to_string()),
                SegmentValue::Last => String::new(),
            })
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(by_class.values().enumerate().map(|(i, xs)| {
                Boxplot::new_vertical(SegmentValue::CenterOf(i as i32), &Quartiles::new(xs)).width(30).style(BLUE)
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_atomic(path, svg.as_bytes())
}

/// Mean Dice (and per-class Dice) against motion severity.
pub fn plot_robustness(rows: &[RobustnessRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Contract("no sweep rows to plot".into()));
    }
    let amax = rows.iter().map(|r| r.alpha).fold(0.0, f64::max).max(1e-3);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Dice vs. motion severity", ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..amax * 1.05, 0f64..1.05f64)
            .map_err(plot_err)?;
        chart.configure_mesh().x_desc("alpha").y_desc("Dice").draw().map_err(plot_err)?;
        let classes: Vec<&String> = rows[0].dice_per_class.keys().collect();
        for (i, c) in classes.iter().enumerate() {
            let colour = Palette99::pick(i + 1).to_rgba();
            let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.dice_per_class.get(*c).map(|d| (r.alpha, *d))).collect();
            chart
                .draw_series(LineSeries::new(pts, colour.stroke_width(1)))
                .map_err(plot_err)?
                .label(c.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], colour));
        }
        let mean: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.mean_dice)).collect();
        chart
            .draw_series(LineSeries::new(mean.clone(), BLACK.stroke_width(2)))
            .map_err(plot_err)?
            .label("mean")
            .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK));
        chart.draw_series(mean.into_iter().map(|p| Circle::new(p, 3, BLACK.filled()))).map_err(plot_err)?;
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    write_atomic(path, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::EvalRecord;

    #[test]
    fn figures_are_svg() {
        let dir = tempfile::tempdir().unwrap();
        let records = (0..4)
            .map(|i| EvalRecord {
                volume_id: format!("v{i}"),
                method: "m".into(),
                site: None,
                age_bucket: None,
                dice: [("csf", 0.7 + 0.05 * i as f64), ("white_matter", 0.9 - 0.02 * i as f64)].map(|(k, v)| (k.to_string(), v)).into(),
            })
            .collect();
        let report = EvalReport { records, ..EvalReport::default() };
        plot_dice_boxplot(&report, "test", &dir.path().join("box.svg")).unwrap();
        let rows: Vec<RobustnessRow> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&a| RobustnessRow { alpha: a, n: 1, mean_dice: 0.9 - 0.1 * a, dice_per_class: [("csf".to_string(), 0.8 - 0.1 * a)].into() })
            .collect();
        plot_robustness(&rows, &dir.path().join("sweep.svg")).unwrap();
        for f in ["box.svg", "sweep.svg"] {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.starts_with("<svg") && text.contains("</svg>"), "{f}");
        }
    }
}
