//! Static image and table renderings: motion-field quivers, per-group error
//! bars and summary tables.
//!
//! Quiver images are `H * pixels_per_cell` wide and `W * pixels_per_cell`
//! tall, with x to the right and y up.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::dataset::{PredictionFile, PredictionRecord};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::harness::ablate::AblationTable;
use crate::harness::config::PlotConfig;
use crate::metrics::{MetricReport, SpeedGroup};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);

/// Displacements shorter than this are not drawn.
const MIN_ARROW: f64 = 0.05;

pub fn group_color(g: SpeedGroup) -> Rgb<u8> {
    match g {
        SpeedGroup::Static => Rgb([150, 150, 150]),
        SpeedGroup::Slow => Rgb([30, 110, 220]),
        SpeedGroup::Fast => Rgb([220, 50, 40]),
    }
}

fn check_plot(cfg: &PlotConfig) -> Result<()> {
    if cfg.pixels_per_cell < 2 || cfg.arrow_stride == 0 {
        return Err(Error::config("plot.pixels_per_cell must be >= 2 and plot.arrow_stride >= 1"));
    }
    Ok(())
}

/// Final-step motion of one record, one arrow per cell, colored by the speed
/// group of the arrow itself.
pub fn render_quiver(record: &PredictionRecord, spec: &GridSpec, cfg: &PlotConfig) -> Result<RgbImage> {
    check_plot(cfg)?;
    let (h, w) = (spec.height(), spec.width());
    let n = spec.cells();
    let t = spec.output_steps();
    if record.motion.len() != t * n * 2 {
        return Err(Error::shape(format!("prediction has {} motion values, grid needs {}", record.motion.len(), t * n * 2)));
    }
    let ppc = cfg.pixels_per_cell as f32;
    let mut img = RgbImage::from_pixel(h as u32 * cfg.pixels_per_cell, w as u32 * cfg.pixels_per_cell, BACKGROUND);
    let px_per_m = ppc as f64 / spec.xy_resolution();
    let horizon = spec.horizon_seconds();
    for i in (0..h).step_by(cfg.arrow_stride) {
        for j in (0..w).step_by(cfg.arrow_stride) {
            let o = ((t - 1) * n + i * w + j) * 2;
            let d = [record.motion[o], record.motion[o + 1]];
            let len = (d[0] as f64).hypot(d[1] as f64);
            if !len.is_finite() {
                continue;
            }
            let color = group_color(SpeedGroup::of_displacement(d, horizon));
            let cx = (i as f32 + 0.5) * ppc;
            let cy = ((w - 1 - j) as f32 + 0.5) * ppc;
            if len < MIN_ARROW {
                continue;
            }
            let ex = cx + (d[0] as f64 * px_per_m) as f32;
            let ey = cy - (d[1] as f64 * px_per_m) as f32;
            draw_line_segment_mut(&mut img, (cx, cy), (ex, ey), color);
            draw_filled_circle_mut(&mut img, (ex.round() as i32, ey.round() as i32), 1, color);
        }
    }
    Ok(img)
}

/// One quiver image per sequence, named `quiver_0000.png`, ...
pub fn plot_predictions(preds: &PredictionFile, out_dir: &Path, cfg: &PlotConfig) -> Result<Vec<PathBuf>> {
    if preds.records.is_empty() {
        log::warn!("prediction file has no sequences; nothing to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(preds.records.len());
    for (k, rec) in preds.records.iter().enumerate() {
        let p = out_dir.join(format!("quiver_{k:04}.png"));
        save_png(&render_quiver(rec, &preds.spec, cfg)?, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Grouped bar chart: one group of bars per series, one bar per value.
/// Missing values leave a gap.
pub fn bar_chart(series: &[Vec<Option<f64>>], colors: &[Rgb<u8>]) -> RgbImage {
    const BAR: u32 = 18;
    const GAP: u32 = 14;
    const HEIGHT: u32 = 200;
    const MARGIN: u32 = 10;
    let per = series.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let width = MARGIN * 2 + series.len() as u32 * (per * BAR + GAP);
    let mut img = RgbImage::from_pixel(width.max(MARGIN * 2 + 1), HEIGHT + MARGIN * 2, BACKGROUND);
    let top = series.iter().flatten().flatten().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let scale = if top > 0.0 { HEIGHT as f64 / top } else { 0.0 };
    for (s, values) in series.iter().enumerate() {
        for (k, v) in values.iter().enumerate() {
            let Some(v) = v.filter(|v| v.is_finite()) else { continue };
            let bar_h = ((v * scale).round() as u32).max(1);
            let x = MARGIN + s as u32 * (per * BAR + GAP) + k as u32 * BAR;
            let y = MARGIN + HEIGHT - bar_h;
            let rect = Rect::at(x as i32, y as i32).of_size(BAR - 2, bar_h);
            draw_filled_rect_mut(&mut img, rect, colors[k % colors.len()]);
        }
    }
    draw_line_segment_mut(
        &mut img,
        (MARGIN as f32, (MARGIN + HEIGHT) as f32),
        ((width - MARGIN) as f32, (MARGIN + HEIGHT) as f32),
        AXIS,
    );
    let frame = Rect::at(0, 0).of_size(img.width(), img.height());
    draw_hollow_rect_mut(&mut img, frame, AXIS);
    img
}

fn group_means(report: &MetricReport) -> Vec<Option<f64>> {
    SpeedGroup::ALL.iter().map(|&g| report.groups.get(g).map(|e| e.mean)).collect()
}

pub fn summary_markdown(report: &MetricReport) -> String {
    let mut s = String::from("| Group | Mean | Median | Cells |\n|---|--:|--:|--:|\n");
    for g in SpeedGroup::ALL {
        match report.groups.get(g) {
            Some(e) => {
                let _ = writeln!(s, "| {} | {:.4} | {:.4} | {} |", g.label(), e.mean, e.median, e.count);
            }
            None => {
                let _ = writeln!(s, "| {} | - | - | 0 |", g.label());
            }
        }
    }
    let _ = writeln!(s, "\n| Quantity | Value |\n|---|--:|");
    if let Some(st) = report.stability {
        let _ = writeln!(s, "| Stability (all instances) | {:.6} |", st.mean_variance);
    }
    if let Some((c, Some(st))) = report.stability_category {
        let _ = writeln!(s, "| Stability ({}) | {:.6} |", c.label(), st.mean_variance);
    }
    if let Some(gi) = report.generalization_index {
        let _ = writeln!(s, "| GI (%) | {gi:.1} |");
    }
    if let Some(oa) = report.classification.oa {
        let _ = writeln!(s, "| OA | {oa:.4} |");
    }
    if let Some(mca) = report.classification.mca {
        let _ = writeln!(s, "| MCA | {mca:.4} |");
    }
    s
}

/// Writes `errors_by_group.png` and `summary.md`. A report without valid
/// cells produces no files.
pub fn plot_report(report: &MetricReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if report.valid_cells == 0 {
        log::warn!("report has no evaluated cells; nothing to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    let colors: Vec<Rgb<u8>> = SpeedGroup::ALL.iter().map(|&g| group_color(g)).collect();
    let chart = out_dir.join("errors_by_group.png");
    save_png(&bar_chart(&[group_means(report)], &colors), &chart)?;
    let table = out_dir.join("summary.md");
    std::fs::write(&table, summary_markdown(report))?;
    Ok(vec![chart, table])
}

/// Writes `ablation_errors.png` (one bar group per row) and `ablation.md`.
pub fn plot_ablation(table: &AblationTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        log::warn!("ablation table is empty; nothing to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    let colors: Vec<Rgb<u8>> = SpeedGroup::ALL.iter().map(|&g| group_color(g)).collect();
    let series: Vec<Vec<Option<f64>>> = table.rows.iter().map(|r| group_means(&r.report)).collect();
    let chart = out_dir.join("ablation_errors.png");
    save_png(&bar_chart(&series, &colors), &chart)?;
    let md = out_dir.join("ablation.md");
    std::fs::write(&md, table.to_markdown())?;
    Ok(vec![chart, md])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec::new([-2.0, 2.0], [-3.0, 3.0], [-1.0, 1.0], 0.5, 0.5, 0.2, 2, 3).unwrap()
    }

    #[test]
    fn quiver_dimensions_follow_the_grid() {
        let spec = spec();
        let n = spec.cells();
        let mut rec = PredictionRecord {
            motion: vec![0.0; spec.output_steps() * n * 2],
            category_logits: vec![0.0; n * 5],
            state_logits: vec![0.0; n],
        };
        let last = (spec.output_steps() - 1) * n * 2;
        rec.motion[last] = 4.0;
        let cfg = PlotConfig { pixels_per_cell: 10, arrow_stride: 1 };
        let img = render_quiver(&rec, &spec, &cfg).unwrap();
        assert_eq!((img.width(), img.height()), (spec.height() as u32 * 10, spec.width() as u32 * 10));
        assert!(img.pixels().any(|p| *p == group_color(SpeedGroup::Fast)));
        rec.motion.pop();
        assert!(render_quiver(&rec, &spec, &cfg).is_err());
    }

    #[test]
    fn empty_inputs_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let preds = PredictionFile { spec: spec(), records: vec![] };
        assert!(plot_predictions(&preds, dir.path(), &PlotConfig::default()).unwrap().is_empty());
        assert!(plot_ablation(&AblationTable::default(), dir.path()).unwrap().is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn bars_scale_to_the_largest_value() {
        let img = bar_chart(&[vec![Some(1.0), None, Some(2.0)]], &[AXIS]);
        assert_eq!(img.height(), 220);
    }
}
