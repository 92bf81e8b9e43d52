//! SVG figures from run outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::env::{Cell, MazeLayout};
use crate::error::{Error, Result};

/// Reads the named float columns from a CSV file. Missing columns are an
/// error naming the file; empty cells read as NaN.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let file = path.display().to_string();
    let data_err = |message: String| Error::Data {
        file: file.clone(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| data_err(e.to_string()))?;
    let headers = r.headers().map_err(|e| data_err(e.to_string()))?.clone();
    let missing: Vec<&str> = names.iter().copied().filter(|n| !headers.iter().any(|h| h == *n)).collect();
    if !missing.is_empty() {
        return Err(data_err(format!("missing columns: {}", missing.join(", "))));
    }
    let idx: Vec<usize> = names.iter().map(|n| headers.iter().position(|h| h == *n).unwrap_or(0)).collect();
    let mut cols = vec![Vec::new(); names.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        for (c, &i) in idx.iter().enumerate() {
            let cell = rec.get(i).unwrap_or("");
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| data_err(format!("column {}: bad number '{cell}'", names[c])))?
            };
            cols[c].push(v);
        }
    }
    Ok(cols)
}

fn plot_err(out: &Path, e: impl std::fmt::Display) -> Error {
    Error::Plot {
        file: out.display().to_string(),
        message: e.to_string(),
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Success curve with its bootstrap band, from `curves.csv`.
pub fn learning_curve(curves: &Path, out: &Path) -> Result<()> {
    let cols = read_columns(curves, &["iteration", "mean", "low", "high"])?;
    let (it, mean, low, high) = (&cols[0], &cols[1], &cols[2], &cols[3]);
    let (x0, x1) = bounds(it.iter().copied());
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(out, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("eval success", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(x0..x1, 0.0..1.05)
        .map_err(|e| plot_err(out, e))?;
    chart
        .configure_mesh()
        .x_desc("game iteration")
        .y_desc("success rate")
        .draw()
        .map_err(|e| plot_err(out, e))?;
    let band: Vec<(f64, f64)> = it
        .iter()
        .zip(high)
        .map(|(x, y)| (*x, *y))
        .chain(it.iter().zip(low).rev().map(|(x, y)| (*x, *y)))
        .collect();
    chart
        .draw_series(std::iter::once(Polygon::new(band, BLUE.mix(0.2).filled())))
        .map_err(|e| plot_err(out, e))?;
    chart
        .draw_series(LineSeries::new(it.iter().zip(mean).map(|(x, y)| (*x, *y)), BLUE.stroke_width(2)))
        .map_err(|e| plot_err(out, e))?;
    root.present().map_err(|e| plot_err(out, e))?;
    Ok(())
}

/// Reset-skill rollouts colored by skill, from `skills.csv`.
pub fn skill_fan(skills: &Path, out: &Path) -> Result<()> {
    let cols = read_columns(skills, &["step", "skill", "x", "y"])?;
    let mut paths: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
    for i in 0..cols[0].len() {
        let z = if cols[1][i].is_finite() { cols[1][i] as usize } else { 0 };
        let p = (cols[2][i], cols[3][i]);
        if cols[0][i] == 0.0 || paths.is_empty() {
            paths.push((z, vec![p]));
        } else if let Some(last) = paths.last_mut() {
            last.1.push(p);
        }
    }
    let (x0, x1) = bounds(cols[2].iter().copied().chain([-6.0, 6.0]));
    let (y0, y1) = bounds(cols[3].iter().copied().chain([-6.0, 6.0]));
    let root = SVGBackend::new(out, (600, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(out, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("reset skills", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(35)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(out, e))?;
    chart.configure_mesh().draw().map_err(|e| plot_err(out, e))?;
    for (z, path) in paths {
        let color = Palette99::pick(z).stroke_width(1);
        chart.draw_series(LineSeries::new(path, color)).map_err(|e| plot_err(out, e))?;
    }
    chart
        .draw_series(std::iter::once(Circle::new((0.0, 0.0), 5, BLACK.filled())))
        .map_err(|e| plot_err(out, e))?;
    root.present().map_err(|e| plot_err(out, e))?;
    Ok(())
}

/// Maze walls with the hierarchy's best path, from `maze_path.csv`.
pub fn maze_path(path_csv: &Path, layout: &MazeLayout, out: &Path) -> Result<()> {
    let cols = read_columns(path_csv, &["x", "y"])?;
    let c = layout.cell_size();
    let half_w = layout.cols() as f64 * c / 2.0;
    let half_h = layout.rows() as f64 * c / 2.0;
    let root = SVGBackend::new(out, (600, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(out, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("maze path", ("sans-serif", 20))
        .margin(10)
        .build_cartesian_2d(-half_w..half_w, -half_h..half_h)
        .map_err(|e| plot_err(out, e))?;
    let mut walls = Vec::new();
    for r in 0..layout.rows() {
        for col in 0..layout.cols() {
            if layout.cell(r, col) == Cell::Wall {
                let [cx, cy] = layout.cell_center(r, col);
                walls.push(Rectangle::new(
                    [(cx - c / 2.0, cy - c / 2.0), (cx + c / 2.0, cy + c / 2.0)],
                    BLACK.mix(0.7).filled(),
                ));
            }
        }
    }
    chart.draw_series(walls).map_err(|e| plot_err(out, e))?;
    let goal = layout.goal_cell();
    let [gx, gy] = layout.cell_center(goal.0, goal.1);
    chart
        .draw_series(std::iter::once(Circle::new((gx, gy), 8, GREEN.filled())))
        .map_err(|e| plot_err(out, e))?;
    chart
        .draw_series(LineSeries::new(cols[0].iter().zip(&cols[1]).map(|(x, y)| (*x, *y)), RED.stroke_width(2)))
        .map_err(|e| plot_err(out, e))?;
    root.present().map_err(|e| plot_err(out, e))?;
    Ok(())
}

/// Writes every figure whose input exists under a run directory; returns the SVG paths.
pub fn emit_plots(run_dir: &Path, maze: &MazeLayout) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let curves = run_dir.join("curves.csv");
    if curves.exists() {
        let out = run_dir.join("learning_curve.svg");
        learning_curve(&curves, &out)?;
        written.push(out);
    }
    let mut seeds: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(run_dir)? {
        let p = entry?.path();
        if p.is_dir() {
            if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                if n.starts_with("seed_") {
                    seeds.insert(n.to_string(), p);
                }
            }
        }
    }
    for dir in seeds.values() {
        let skills = dir.join("skills.csv");
        if skills.exists() {
            let out = dir.join("skills.svg");
            skill_fan(&skills, &out)?;
            written.push(out);
        }
        let maze_csv = dir.join("maze_path.csv");
        if maze_csv.exists() {
            let out = dir.join("maze_path.svg");
            maze_path(&maze_csv, maze, &out)?;
            written.push(out);
        }
    }
    Ok(written)
}
