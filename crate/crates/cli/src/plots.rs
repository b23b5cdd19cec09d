//! Static SVG figures: map overlays, metric CDFs, drift against distance and
//! interval quality against injected noise.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use plotters::prelude::*;
use umloc::evalkit::{self, MetricsReport, ReportBlock};
use umloc::mapkit::OccupancyGrid;

const SIZE: (u32, u32) = (720, 480);

type Xy = Vec<(f64, f64)>;

pub struct Series {
    pub label: String,
    pub points: Xy,
}

/// Axis bounds covering every point with a small margin.
fn bounds(points: impl Iterator<Item = (f64, f64)>) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| {
        let w = if b > a { (b - a) * 0.05 } else { 0.5 };
        (a - w, b + w)
    };
    (pad(x0, x1), pad(y0, y1))
}

fn save(path: &Path, svg: String) -> Result<()> {
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))
}

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Line chart with an optional shaded band `(x, low, high)` under the first series.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[Series],
    band: Option<&[(f64, f64, f64)]>,
) -> Result<()> {
    let band_pts = band
        .unwrap_or(&[])
        .iter()
        .flat_map(|&(x, lo, hi)| [(x, lo), (x, hi)]);
    let ((x0, x1), (y0, y1)) = bounds(
        series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .chain(band_pts),
    );
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(x_desc)
            .y_desc(y_desc)
            .draw()
            .map_err(plot_err)?;
        if let Some(b) = band {
            let mut poly: Vec<(f64, f64)> = b.iter().map(|&(x, lo, _)| (x, lo)).collect();
            poly.extend(b.iter().rev().map(|&(x, _, hi)| (x, hi)));
            chart
                .draw_series(std::iter::once(Polygon::new(
                    poly,
                    Palette99::pick(0).mix(0.2).filled(),
                )))
                .map_err(plot_err)?;
        }
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(
                    s.points.iter().copied(),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(s.label.as_str())
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
                });
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    save(path, svg)
}

/// A trajectory drawn over the floor plan.
pub struct Overlay<'a> {
    pub title: String,
    pub grid: &'a OccupancyGrid,
    pub truth: &'a [[f64; 2]],
    pub prediction: Option<&'a [[f64; 2]]>,
    /// Trajectories decoded from different noise draws.
    pub samples: &'a [Vec<[f64; 2]>],
}

pub fn overlay(path: &Path, o: &Overlay) -> Result<()> {
    let g = o.grid;
    let r = g.resolution();
    let [ox, oy] = g.origin();
    let x_range = (ox - r / 2.0)..(ox + (g.width() as f64 - 0.5) * r);
    let y_range = (oy - r / 2.0)..(oy + (g.height() as f64 - 0.5) * r);
    let aspect = (y_range.end - y_range.start) / (x_range.end - x_range.start);
    let w = 640u32;
    let h = ((w as f64 * aspect).round() as u32).clamp(200, 1600) + 60;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (w + 60, h)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&o.title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(x_range, y_range)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("x (m)")
            .y_desc("y (m)")
            .draw()
            .map_err(plot_err)?;
        let walls = (0..g.height())
            .flat_map(|i| (0..g.width()).map(move |j| (i, j)))
            .filter(|&(i, j)| !g.is_free(i, j));
        chart
            .draw_series(walls.map(|(i, j)| {
                let [cx, cy] = g.cell_center(i, j);
                Rectangle::new(
                    [(cx - r / 2.0, cy - r / 2.0), (cx + r / 2.0, cy + r / 2.0)],
                    RGBColor(90, 90, 90).filled(),
                )
            }))
            .map_err(plot_err)?;
        let sample_color = RGBColor(230, 120, 30).mix(0.25);
        for (k, s) in o.samples.iter().enumerate() {
            let series = chart
                .draw_series(LineSeries::new(
                    s.iter().map(|p| (p[0], p[1])),
                    sample_color.stroke_width(1),
                ))
                .map_err(plot_err)?;
            if k == 0 {
                series
                    .label(format!("{} samples", o.samples.len()))
                    .legend(move |(x, y)| {
                        PathElement::new(vec![(x, y), (x + 16, y)], sample_color.stroke_width(2))
                    });
            }
        }
        let mut lines: Vec<(&str, &[[f64; 2]], RGBColor)> =
            vec![("ground truth", o.truth, RGBColor(20, 90, 200))];
        if let Some(p) = o.prediction {
            lines.push(("prediction", p, RGBColor(200, 30, 30)));
        }
        for (label, pts, color) in lines {
            chart
                .draw_series(LineSeries::new(
                    pts.iter().map(|p| (p[0], p[1])),
                    color.stroke_width(2),
                ))
                .map_err(plot_err)?
                .label(label)
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
                });
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    save(path, svg)
}

/// Empirical CDF as a staircase.
fn staircase(values: &[f64]) -> Xy {
    let mut out = vec![];
    let mut prev = 0.0;
    for (x, f) in evalkit::cdf(values) {
        out.push((x, prev));
        out.push((x, f));
        prev = f;
    }
    out
}

/// Trajectory blocks of the unperturbed run, one per trajectory.
pub fn clean_blocks(report: &MetricsReport) -> Vec<&ReportBlock> {
    let mut seen: Vec<&str> = Vec::new();
    report
        .blocks
        .iter()
        .filter(|b| b.noise_mult == 0.0 && b.dropout == 0.0)
        .filter(|b| {
            let new = !seen.contains(&b.trajectory.as_str());
            if new {
                seen.push(&b.trajectory);
            }
            new
        })
        .collect()
}

/// Writes `cdf_ate.svg` and `cdf_rte.svg`. Returns the written file names.
pub fn metric_cdfs(out: &Path, report: &MetricsReport) -> Result<Vec<String>> {
    let clean = clean_blocks(report);
    if clean.is_empty() {
        bail!("report has no unperturbed trajectory blocks");
    }
    let mut names = Vec::new();
    for (name, title, values) in [
        (
            "cdf_ate.svg",
            "ATE",
            clean.iter().map(|b| b.ate_m).collect::<Vec<_>>(),
        ),
        (
            "cdf_rte.svg",
            "RTE",
            clean.iter().map(|b| b.rte_m).collect(),
        ),
    ] {
        let s = Series {
            label: format!("{title} over {} trajectories", values.len()),
            points: staircase(&values),
        };
        line_chart(
            &out.join(name),
            &format!("{title} CDF"),
            &format!("{title} (m)"),
            "fraction of trajectories",
            &[s],
            None,
        )?;
        names.push(name.to_string());
    }
    Ok(names)
}

/// PICP and AIW against the noise multiplier, one line per level. Skipped
/// (returns no names) when the report holds a single noise setting.
pub fn noise_curves(out: &Path, report: &MetricsReport) -> Result<Vec<String>> {
    let aggs: Vec<&ReportBlock> = report
        .aggregates
        .iter()
        .filter(|b| b.dropout == 0.0)
        .collect();
    let mut mults: Vec<f64> = aggs.iter().map(|b| b.noise_mult).collect();
    mults.sort_by(|a, b| a.total_cmp(b));
    mults.dedup();
    if mults.len() < 2 {
        return Ok(Vec::new());
    }
    let mut levels: Vec<u32> = aggs.iter().map(|b| b.level).collect();
    levels.sort();
    levels.dedup();
    let mut names = Vec::new();
    for (name, title, metric) in [
        (
            "picp_vs_noise.svg",
            "PICP",
            (|b: &ReportBlock| b.picp) as fn(&ReportBlock) -> f64,
        ),
        ("aiw_vs_noise.svg", "AIW (m/s)", |b: &ReportBlock| b.aiw_mps),
    ] {
        let series: Vec<Series> = levels
            .iter()
            .map(|&l| {
                let mut pts: Xy = aggs
                    .iter()
                    .filter(|b| b.level == l)
                    .map(|b| (b.noise_mult, metric(b)))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    label: format!("{l}% interval"),
                    points: pts,
                }
            })
            .collect();
        line_chart(
            &out.join(name),
            &format!("{title} under injected noise"),
            "noise multiplier",
            title,
            &series,
            None,
        )?;
        names.push(name.to_string());
    }
    Ok(names)
}

/// Median drift with its quartile band, pooled over trajectories.
pub fn drift(path: &Path, pairs: &[(&[[f64; 2]], &[[f64; 2]])], bin_m: f64) -> Result<()> {
    let bins = evalkit::drift_vs_distance(pairs, bin_m)?;
    if bins.is_empty() {
        bail!("no positions to bin");
    }
    let median = Series {
        label: "median".into(),
        points: bins.iter().map(|&(d, _, m, _)| (d, m)).collect(),
    };
    let band: Vec<(f64, f64, f64)> = bins.iter().map(|&(d, q1, _, q3)| (d, q1, q3)).collect();
    line_chart(
        path,
        "Drift against distance travelled",
        "distance travelled (m)",
        "position error (m)",
        &[median],
        Some(&band),
    )
}
