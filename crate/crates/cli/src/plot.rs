//! SVG figures from a run's `metrics.jsonl` and `scatter.csv`.

use std::path::Path;

use plotters::prelude::*;
use tham_core::eval::FeatureRow;
use tham_core::training::{read_metrics, EpochRecord};
use tham_core::{Error, Result};

type Series = (String, Vec<(f64, f64)>);

fn draw_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Integrity(format!("plot: {e}"))
}

fn bounds(series: &[Series]) -> Option<((f64, f64), (f64, f64))> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.1.is_finite()).collect();
    if pts.is_empty() {
        return None;
    }
    let fold = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    Some((fold(|p| p.0), fold(|p| p.1)))
}

fn line_chart(path: &Path, title: &str, series: &[Series]) -> Result<bool> {
    let Some(((x0, x1), (y0, y1))) = bounds(series) else {
        return Ok(false);
    };
    let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let pad = (y1 - y0) * 0.05;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(draw_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(true)
}

fn series(records: &[&EpochRecord], name: &str, f: fn(&EpochRecord) -> Option<f64>) -> Series {
    (
        name.to_string(),
        records.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect(),
    )
}

fn scatter(path: &Path, rows: &[FeatureRow]) -> Result<()> {
    let root = SVGBackend::new(path, (880, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (left, right) = root.split_horizontally(440);
    let panels: [(&DrawingArea<SVGBackend, plotters::coord::Shift>, &str, fn(&FeatureRow) -> f64); 2] =
        [(&left, "F vs F*", |r| r.f_star), (&right, "F vs G", |r| r.g)];
    for (area, title, ysel) in panels {
        let s = vec![(String::new(), rows.iter().map(|r| (r.f, ysel(r))).collect::<Vec<_>>())];
        let Some(((x0, x1), (y0, y1))) = bounds(&s) else {
            continue;
        };
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(44)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(draw_err)?;
        chart.configure_mesh().draw().map_err(draw_err)?;
        chart
            .draw_series(s[0].1.iter().map(|&p| Circle::new(p, 2, BLUE.mix(0.5).filled())))
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(())
}

/// Renders whatever figures the inputs in `run` support into `out`.
pub fn render(run: &Path, out: &Path) -> Result<()> {
    let mut drawn = 0;
    let metrics = run.join("metrics.jsonl");
    if metrics.exists() {
        let all = read_metrics(&metrics)?;
        let s1: Vec<&EpochRecord> = all.iter().filter(|r| r.stage == 1).collect();
        let s2: Vec<&EpochRecord> = all.iter().filter(|r| r.stage == 2).collect();
        let stage1 = [
            series(&s1, "val rlm", |r| r.val_ce),
            series(&s1, "val hlm", |r| r.val_hlm),
            series(&s1, "val lm", |r| r.val_lm),
            series(&s1, "train rlm", |r| r.l_rlm),
        ];
        drawn += line_chart(&out.join("loss_stage1.svg"), "stage 1 cross-entropy", &stage1)? as usize;
        let thr = [series(&s2, "L_THR", |r| r.l_thr), series(&s2, "val L_THR", |r| r.val_thr)];
        drawn += line_chart(&out.join("thr_stage2.svg"), "stage 2 THR loss", &thr)? as usize;
        let ce = [series(&s2, "train L_RLM", |r| r.l_rlm), series(&s2, "val L_RLM", |r| r.val_ce)];
        drawn += line_chart(&out.join("ce_stage2.svg"), "stage 2 cross-entropy", &ce)? as usize;
    }
    let scatter_csv = run.join("scatter.csv");
    if scatter_csv.exists() {
        let mut rd = csv::Reader::from_path(&scatter_csv)?;
        let rows: Vec<FeatureRow> = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        scatter(&out.join("scatter.svg"), &rows)?;
        drawn += 1;
    }
    if drawn == 0 {
        return Err(Error::Integrity(format!(
            "{} has neither metrics.jsonl nor scatter.csv to plot",
            run.display()
        )));
    }
    Ok(())
}
