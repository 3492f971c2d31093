//! Run comparison tables and curve plots.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;
use vemkd_core::metrics::MetricsReport;
use vemkd_core::trainer::{EVAL_CSV, METRICS_JSONL, TRAIN_CSV};
use vemkd_core::{Error, Result};

const PLOT_SIZE: (u32, u32) = (640, 400);
const EVAL_METRICS: [&str; 4] = ["toy_fid", "ssim_to_target", "l1_to_target", "psnr"];

#[derive(Serialize)]
struct Row {
    run: String,
    iteration: usize,
    toy_fid: f64,
    delta_toy_fid: f64,
    ssim_to_target: f64,
    l1_to_target: f64,
    psnr: f64,
    params: usize,
    macs: usize,
}

fn format_err(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn final_metrics(run: &Path) -> Result<(usize, MetricsReport)> {
    let path = run.join(METRICS_JSONL);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let last = text
        .lines()
        .rfind(|l| !l.trim().is_empty())
        .ok_or_else(|| format_err(&path, "no evaluations recorded"))?;
    let v: serde_json::Value = serde_json::from_str(last).map_err(|e| format_err(&path, e))?;
    let it = v["iteration"]
        .as_u64()
        .ok_or_else(|| format_err(&path, "missing iteration"))? as usize;
    let r = serde_json::from_value(v["report"].clone()).map_err(|e| format_err(&path, e))?;
    Ok((it, r))
}

type Series = (String, Vec<(f64, f64)>);

/// Numeric columns of a CSV as `(name, [(x, y)])`, with `iter` on the x axis.
fn read_series(path: &Path) -> Result<Vec<Series>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| format_err(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| format_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let xcol = headers
        .iter()
        .position(|h| h == "iter")
        .ok_or_else(|| format_err(path, "no iter column"))?;
    let mut series: Vec<Series> = headers.iter().map(|h| (h.clone(), Vec::new())).collect();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let Some(x) = rec.get(xcol).and_then(|v| v.parse::<f64>().ok()) else {
            continue;
        };
        for (i, field) in rec.iter().enumerate() {
            if let Ok(y) = field.parse::<f64>() {
                if y.is_finite() {
                    series[i].1.push((x, y));
                }
            }
        }
    }
    series.remove(xcol);
    Ok(series.into_iter().filter(|(_, pts)| !pts.is_empty()).collect())
}

fn plot(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let draw_err = |e: &dyn std::fmt::Display| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let (x0, x1) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = points
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let root = BitMapBackend::new(path, PLOT_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .build_cartesian_2d(x0..x1.max(x0 + 1.0), (y0 - pad)..(y1 + pad))
        .map_err(|e| draw_err(&e))?;
    chart
        .plotting_area()
        .draw(&Rectangle::new(
            [(x0, y0 - pad), (x1.max(x0 + 1.0), y1 + pad)],
            BLACK.stroke_width(1),
        ))
        .map_err(|e| draw_err(&e))?;
    chart
        .draw_series(LineSeries::new(points.iter().copied(), BLUE.stroke_width(2)))
        .map_err(|e| draw_err(&e))?;
    root.present().map_err(|e| draw_err(&e))?;
    Ok(())
}

/// Plots every numeric training and evaluation column as `<run>/<metric>.png`.
fn plot_run(run: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut series = read_series(&run.join(TRAIN_CSV))?;
    let eval = run.join(EVAL_CSV);
    if eval.exists() {
        series.extend(
            read_series(&eval)?
                .into_iter()
                .filter(|(n, _)| EVAL_METRICS.contains(&n.as_str())),
        );
    }
    for (name, pts) in series {
        let path = run.join(format!("{name}.png"));
        plot(&path, &pts)?;
        written.push(path);
    }
    Ok(written)
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let missing: Vec<String> = runs
        .iter()
        .filter(|r| !r.is_dir())
        .map(|r| r.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Io {
            path: PathBuf::from(missing.join(", ")),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        });
    }
    let mut rows = Vec::new();
    for run in runs {
        let (iteration, m) = final_metrics(run)?;
        let base = rows.first().map(|r: &Row| r.toy_fid).unwrap_or(m.toy_fid);
        rows.push(Row {
            run: run.display().to_string(),
            iteration,
            toy_fid: m.toy_fid,
            delta_toy_fid: m.toy_fid - base,
            ssim_to_target: m.ssim_to_target,
            l1_to_target: m.l1_to_target,
            psnr: m.psnr,
            params: m.params,
            macs: m.macs,
        });
        plot_run(run)?;
    }
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    println!(
        "{:<width$}  {:>6}  {:>10}  {:>10}  {:>8}  {:>8}  {:>8}  {:>9}  {:>11}",
        "run", "iter", "toy_fid", "Δtoy_fid", "ssim", "l1", "psnr", "params", "macs"
    );
    for r in &rows {
        println!(
            "{:<width$}  {:>6}  {:>10.4}  {:>+10.4}  {:>8.4}  {:>8.4}  {:>8.3}  {:>9}  {:>11}",
            r.run, r.iteration, r.toy_fid, r.delta_toy_fid, r.ssim_to_target, r.l1_to_target, r.psnr, r.params, r.macs
        );
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_path = out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| format_err(&csv_path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| format_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
