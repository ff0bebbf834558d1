//! Summary tables and figures rendered from a finalized run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::image::Image;

use super::run::{csv_field, record_figures, slug, ExperimentRun, FigureRef, TraceRef};

pub const REPORT_DIR: &str = "report";
pub const SUMMARY_FILE: &str = "summary.csv";

const WIDTH: u32 = 480;
const HEIGHT: u32 = 300;
const MARGIN_L: i64 = 40;
const MARGIN_R: i64 = 16;
const MARGIN_T: i64 = 16;
const MARGIN_B: i64 = 28;

const COLORS: [[u8; 3]; 6] = [
    [200, 40, 40],
    [30, 90, 200],
    [20, 150, 60],
    [200, 120, 0],
    [130, 40, 170],
    [0, 150, 160],
];
const FLOOR_COLOR: [u8; 3] = [110, 110, 110];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub summary_csv: PathBuf,
    pub figures: Vec<FigureRef>,
    /// Artifacts that could not be read; the report is partial.
    pub warnings: Vec<String>,
}

/// Writes the summary CSV and every figure for the run in `run_dir`, and
/// records the figure paths on the run. Re-emitting gives identical files.
pub fn emit_report(run_dir: impl AsRef<Path>) -> Result<ReportSummary> {
    let run_dir = run_dir.as_ref();
    let run = ExperimentRun::load(run_dir)?;
    if !run.finalized {
        return Err(Error::InvalidArgument(format!("run {} is not finalized", run.run_id)));
    }
    let fig_dir = run_dir.join(REPORT_DIR).join("figures");
    std::fs::create_dir_all(&fig_dir)?;
    let summary_rel = PathBuf::from(REPORT_DIR).join(SUMMARY_FILE);
    std::fs::write(run_dir.join(&summary_rel), summary_csv(&run))?;

    let mut warnings = Vec::new();
    let mut figures = Vec::new();
    let fig_rel = |name: String| PathBuf::from(REPORT_DIR).join("figures").join(name);

    let mut groups: Vec<(String, String, u64, Vec<&TraceRef>)> = Vec::new();
    for t in run.traces.iter().filter(|t| !t.kind.starts_with("stagnation")) {
        match groups
            .iter_mut()
            .find(|g| g.0 == t.cell && g.1 == t.method && g.2 == t.seed)
        {
            Some(g) => g.3.push(t),
            None => groups.push((t.cell.clone(), t.method.clone(), t.seed, vec![t])),
        }
    }
    for (cell, method, seed, traces) in groups {
        let series = load_series(run_dir, &traces, &mut warnings);
        if series.is_empty() {
            continue;
        }
        let rel = fig_rel(format!("loss__{}__{}__s{seed}.png", slug(&cell), slug(&method)));
        line_plot(&series, None, &run_dir.join(&rel))?;
        figures.push(FigureRef {
            kind: "loss-curve".into(),
            path: rel,
        });
    }

    let mut stag: Vec<(String, u64, Vec<&TraceRef>)> = Vec::new();
    for t in run.traces.iter().filter(|t| t.kind.starts_with("stagnation")) {
        match stag.iter_mut().find(|g| g.0 == t.cell && g.1 == t.seed) {
            Some(g) => g.2.push(t),
            None => stag.push((t.cell.clone(), t.seed, vec![t])),
        }
    }
    for (cell, seed, traces) in stag {
        let series = load_series(run_dir, &traces, &mut warnings);
        if series.is_empty() {
            continue;
        }
        let floor = traces.iter().find_map(|t| t.floor);
        let rel = fig_rel(format!("stagnation__{}__s{seed}.png", slug(&cell)));
        line_plot(&series, floor, &run_dir.join(&rel))?;
        figures.push(FigureRef {
            kind: "stagnation".into(),
            path: rel,
        });
    }

    for b in &run.biases {
        let (learned, truth) = match (
            Image::load(run_dir.join(&b.learned)),
            Image::load(run_dir.join(&b.truth)),
        ) {
            (Ok(l), Ok(t)) => (l, t),
            (Err(e), _) | (_, Err(e)) => {
                warnings.push(format!("bias {} {} seed {}: {e}", b.cell, b.method, b.seed));
                continue;
            }
        };
        let rel = fig_rel(format!("bias__{}__{}__s{}.png", slug(&b.cell), slug(&b.method), b.seed));
        side_by_side(&[&learned, &truth], &run_dir.join(&rel))?;
        figures.push(FigureRef {
            kind: "bias-vs-truth".into(),
            path: rel,
        });
    }
    for w in &warnings {
        log::warn!("partial report: {w}");
    }
    record_figures(run_dir, figures.clone())?;
    Ok(ReportSummary {
        summary_csv: summary_rel,
        figures,
        warnings,
    })
}

/// Per cell and method: count, mean and sample std of PSNR and SSIM.
pub fn summary_csv(run: &ExperimentRun) -> String {
    let mut out = String::from("run_id,cell,method,n,psnr_mean,psnr_std,ssim_mean,ssim_std\n");
    for cell in run.cells() {
        for method in run.methods() {
            let rows: Vec<_> = run
                .rows
                .iter()
                .filter(|r| r.cell == cell && r.method == method)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let (pm, ps) = mean_std(rows.iter().map(|r| r.psnr));
            let (sm, ss) = mean_std(rows.iter().map(|r| r.ssim));
            let _ = writeln!(
                out,
                "{},{},{},{},{pm:.6},{ps:.6},{sm:.6},{ss:.6}",
                run.run_id,
                csv_field(&cell),
                csv_field(&method),
                rows.len()
            );
        }
    }
    out
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn load_series(run_dir: &Path, traces: &[&TraceRef], warnings: &mut Vec<String>) -> Vec<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for t in traces {
        match read_trace(&run_dir.join(&t.path)) {
            Ok(points) if !points.is_empty() => out.push(points),
            Ok(_) => warnings.push(format!("trace {} is empty", t.path.display())),
            Err(e) => warnings.push(format!("trace {}: {e}", t.path.display())),
        }
    }
    out
}

fn read_trace(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l
                .split_once(',')
                .ok_or_else(|| Error::InvalidArgument(format!("bad trace line {l:?}")))?;
            let parse = |x: &str| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidArgument(format!("bad trace value {x:?}: {e}")))
            };
            Ok((parse(s)?, parse(v)?))
        })
        .collect()
}

/// Line chart of every series on a shared log-scale y axis (linear when a
/// value is not positive), with an optional dashed horizontal floor line.
/// Series colors follow [`COLORS`] in order.
pub fn line_plot(series: &[Vec<(f64, f64)>], floor: Option<f64>, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let finite = |v: &f64| v.is_finite();
    let all_y: Vec<f64> = series
        .iter()
        .flatten()
        .map(|p| p.1)
        .chain(floor)
        .filter(finite)
        .collect();
    let all_x: Vec<f64> = series.iter().flatten().map(|p| p.0).filter(finite).collect();
    let log = !all_y.is_empty() && all_y.iter().all(|&v| v > 0.0);
    let ty = |v: f64| if log { v.log10() } else { v };
    let (mut y0, mut y1) = bounds(all_y.iter().map(|&v| ty(v)));
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (x0, mut x1) = bounds(all_x.iter().copied());
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let (pl, pr, pt, pb) = (MARGIN_L, WIDTH as i64 - MARGIN_R, MARGIN_T, HEIGHT as i64 - MARGIN_B);
    let px = |x: f64| pl + ((x - x0) / (x1 - x0) * (pr - pl) as f64).round() as i64;
    let py = |y: f64| pb - ((ty(y) - y0) / (y1 - y0) * (pb - pt) as f64).round() as i64;

    let axis = [0, 0, 0];
    line(&mut img, (pl, pb), (pr, pb), axis);
    line(&mut img, (pl, pt), (pl, pb), axis);
    for k in 0..=4 {
        let x = pl + (pr - pl) * k / 4;
        line(&mut img, (x, pb), (x, pb + 4), axis);
    }
    if log {
        for d in y0.ceil() as i64..=y1.floor() as i64 {
            let y = pb - (((d as f64) - y0) / (y1 - y0) * (pb - pt) as f64).round() as i64;
            line(&mut img, (pl - 4, y), (pl, y), axis);
        }
    } else {
        for k in 0..=4 {
            let y = pb - (pb - pt) * k / 4;
            line(&mut img, (pl - 4, y), (pl, y), axis);
        }
    }
    if let Some(f) = floor.filter(finite) {
        let y = py(f);
        let mut x = pl;
        while x < pr {
            line(&mut img, (x, y), ((x + 6).min(pr), y), FLOOR_COLOR);
            x += 10;
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(i64, i64)> = s
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite() && (!log || p.1 > 0.0))
            .map(|&(x, y)| (px(x), py(y)))
            .collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
        if pts.len() == 1 {
            line(&mut img, pts[0], pts[0], color);
        }
        // Legend swatch.
        let lx = pr - 14;
        let ly = pt + 4 + 10 * i as i64;
        for dy in 0..6 {
            line(&mut img, (lx, ly + dy), (lx + 10, ly + dy), color);
        }
    }
    img.save(path)?;
    Ok(())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Panels left to right, each min-max scaled on its own, scaled up 4x.
pub fn side_by_side(images: &[&Image], path: &Path) -> Result<()> {
    const ZOOM: u32 = 4;
    const GAP: u32 = 8;
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0) as u32;
    let w: u32 = images
        .iter()
        .map(|i| i.width() as u32 * ZOOM + GAP)
        .sum::<u32>()
        .saturating_sub(GAP);
    let mut out = RgbImage::from_pixel(w.max(1), (h * ZOOM).max(1), Rgb([255, 255, 255]));
    let mut left = 0;
    for im in images {
        let (lo, hi) = (im.min(), im.max());
        let span = if hi > lo { hi - lo } else { 1.0 };
        for ((r, c), &v) in im.pixels().indexed_iter() {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            for dr in 0..ZOOM {
                for dc in 0..ZOOM {
                    out.put_pixel(left + c as u32 * ZOOM + dc, r as u32 * ZOOM + dr, Rgb([g, g, g]));
                }
            }
        }
        left += im.width() as u32 * ZOOM + GAP;
    }
    out.save(path)?;
    Ok(())
}
