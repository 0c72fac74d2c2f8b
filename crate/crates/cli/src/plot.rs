//! Quick-look PNG figures rendered from the CSV outputs.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Result};
use pa_diffusion::evaluation::{read_rows, SweepRow};
use plotters::prelude::*;
use serde::Deserialize;

const SIZE: (u32, u32) = (800, 560);

/// Font search order; `PA_DIFFUSION_FONT` wins.
const FONT_PATHS: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a TrueType font for labels. Without one, figures are drawn
/// without text.
fn register_font() -> bool {
    let env = std::env::var("PA_DIFFUSION_FONT").ok();
    for path in env.iter().map(String::as_str).chain(FONT_PATHS.iter().copied()) {
        if let Ok(bytes) = std::fs::read(path) {
            let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                return true;
            }
        }
    }
    false
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |a: f64, b: f64| {
        let d = if b > a { (b - a) * 0.05 } else { a.abs().max(1.0) * 0.05 };
        (a - d, b + d)
    };
    (pad(x0, x1), pad(y0, y1))
}

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series], text: bool) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| anyhow!("rendering {}: {e}", path.display());
    let ((x0, x1), (y0, y1)) = bounds(series);
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption(title, ("sans-serif", 24)).x_label_area_size(45).y_label_area_size(65);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(|e| err(&e))?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc(x_desc).y_desc(y_desc);
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(|e| err(&e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let drawn = chart.draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2))).map_err(|e| err(&e))?;
        if text {
            drawn.label(s.name.clone()).legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
        chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(|e| err(&e))?;
    }
    if text && series.len() > 1 {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

fn sweep_series(rows: &[SweepRow]) -> Vec<Series> {
    let mut keys: Vec<(bool, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.use_confidence, r.t_guide)) {
            keys.push((r.use_confidence, r.t_guide));
        }
    }
    keys.into_iter()
        .map(|(h, g)| {
            let mut points: Vec<(f64, f64)> =
                rows.iter().filter(|r| r.use_confidence == h && r.t_guide == g).map(|r| (r.w, r.mean_ssim)).collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name: format!("{} h, t_guide={g}", if h { "with" } else { "without" }), points }
        })
        .collect()
}

#[derive(Deserialize)]
struct CorrelationRow {
    bin_lo: f64,
    bin_hi: f64,
    mean_ssim: Option<f64>,
}

#[derive(Deserialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

/// Moving average over `k` steps, subsampled to at most ~500 points.
fn smooth(rows: &[LossRow], k: usize) -> Vec<(f64, f64)> {
    let stride = (rows.len() / 500).max(1);
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        acc += r.loss;
        if i >= k {
            acc -= rows[i - k].loss;
        }
        if i + 1 >= k.min(rows.len()) && i % stride == 0 {
            out.push((r.step as f64, acc / (i + 1).min(k) as f64));
        }
    }
    out
}

/// Renders every available figure under `out/plots`. Returns the files written.
pub fn plot_all(out: &Path) -> Result<Vec<PathBuf>> {
    let text = register_font();
    if !text {
        log::warn!("no TrueType font found (set PA_DIFFUSION_FONT); figures will have no labels");
    }
    let dir = out.join("plots");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();

    let sweep_csv = out.join("sweep/sweep.csv");
    if sweep_csv.is_file() {
        let rows: Vec<SweepRow> = read_rows(&sweep_csv)?;
        let p = dir.join("sweep.png");
        line_chart(&p, "Guidance scale vs mean SSIM", "w", "mean SSIM", &sweep_series(&rows), text)?;
        written.push(p);
    }

    let corr_csv = out.join("correlate/correlation.csv");
    if corr_csv.is_file() {
        let rows: Vec<CorrelationRow> = read_rows(&corr_csv)?;
        let points = rows.iter().filter_map(|r| r.mean_ssim.map(|m| (0.5 * (r.bin_lo + r.bin_hi), m))).collect();
        let p = dir.join("correlation.png");
        let series = [Series { name: "local SSIM".into(), points }];
        line_chart(&p, "Local SSIM vs confidence", "mean confidence", "mean local SSIM", &series, text)?;
        written.push(p);
    }

    let models = out.join("models");
    if models.is_dir() {
        let mut series = Vec::new();
        let mut names: Vec<_> = std::fs::read_dir(&models)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        names.sort();
        for m in names {
            let csv = m.join("loss.csv");
            if csv.is_file() {
                let rows: Vec<LossRow> = read_rows(&csv)?;
                let k = (rows.len() / 50).max(1);
                let name = m.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                series.push(Series { name, points: smooth(&rows, k) });
            }
        }
        if !series.is_empty() {
            let p = dir.join("loss.png");
            line_chart(&p, "Training loss (moving average)", "step", "loss", &series, text)?;
            written.push(p);
        }
    }

    if written.is_empty() {
        bail!("nothing to plot under {} (run sweep, correlate or train first)", out.display());
    }
    Ok(written)
}
