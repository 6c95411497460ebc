//! SVG figures: training-loss curves and per-class DSC bars.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use cmems::trainer::MetricRecord;

const SIZE: (u32, u32) = (900, 540);

/// Trailing moving average over `window` points.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Smoothed loss terms against iteration.
pub fn loss_curves(records: &[MetricRecord], path: &Path) -> Result<()> {
    let window = (records.len() / 50).max(1);
    let xs: Vec<f64> = records.iter().map(|r| r.iter as f64).collect();
    let terms: [(&str, fn(&MetricRecord) -> f64, RGBColor); 5] = [
        ("L_e", |r| r.l_e, RGBColor(31, 119, 180)),
        ("L_s", |r| r.l_s, RGBColor(255, 127, 14)),
        ("L_cmip", |r| r.l_cmip, RGBColor(44, 160, 44)),
        ("L_cmfp", |r| r.l_cmfp, RGBColor(214, 39, 40)),
        ("L_total", |r| r.l_total, RGBColor(40, 40, 40)),
    ];
    let series: Vec<_> = terms
        .iter()
        .map(|(name, get, color)| {
            let ys = moving_average(&records.iter().map(get).collect::<Vec<_>>(), window);
            (*name, *color, ys)
        })
        .filter(|(_, _, ys)| ys.iter().any(|&y| y != 0.0))
        .collect();
    let x_max = xs.last().copied().unwrap_or(1.0).max(1.0);
    let y_max = series
        .iter()
        .flat_map(|(_, _, ys)| ys.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("Training loss (moving average, window {window})"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("loss")
        .draw()
        .map_err(plot_err)?;
    for (name, color, ys) in series {
        chart
            .draw_series(LineSeries::new(xs.iter().copied().zip(ys), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One bar per label, heights in `[0, 1]`.
pub fn dsc_bars(title: &str, labels: &[String], values: &[f64], path: &Path) -> Result<()> {
    let n = labels.len().max(1);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(60)
        .y_label_area_size(60)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..1.0f64)
        .map_err(plot_err)?;
    let names = labels.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => names.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .y_desc("DSC")
        .draw()
        .map_err(plot_err)?;
    let fill = RGBColor(31, 119, 180).filled();
    chart
        .draw_series(values.iter().enumerate().map(|(i, &v)| {
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v.clamp(0.0, 1.0))],
                fill,
            );
            bar.set_margin(0, 0, 12, 12);
            bar
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(values.iter().enumerate().map(|(i, &v)| {
            Text::new(
                format!("{v:.3}"),
                (SegmentValue::CenterOf(i), (v.clamp(0.0, 1.0) + 0.03).min(0.97)),
                ("sans-serif", 14).into_font(),
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_warms_up() {
        let m = moving_average(&[2.0, 4.0, 6.0, 8.0], 2);
        assert_eq!(m, vec![2.0, 3.0, 5.0, 7.0]);
        assert_eq!(moving_average(&[1.0, 3.0], 0), vec![1.0, 3.0]);
    }

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<MetricRecord> = (1..=20)
            .map(|i| MetricRecord {
                iter: i,
                l_e: 1.0 / i as f64,
                l_s: 0.5,
                l_cmip: 0.0,
                l_cmfp: 0.1,
                l_total: 1.0 / i as f64 + 0.6,
                valid_pixel_fraction: 0.9,
            })
            .collect();
        let a = dir.path().join("loss.svg");
        loss_curves(&recs, &a).unwrap();
        let svg = std::fs::read_to_string(&a).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("L_total") && !svg.contains("L_cmip"));
        let b = dir.path().join("bars.svg");
        dsc_bars("DSC", &["disk".into(), "ring".into()], &[0.5, 0.8], &b).unwrap();
        assert!(std::fs::read_to_string(&b).unwrap().contains("0.800"));
    }
}
