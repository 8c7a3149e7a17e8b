//! Training-curve images drawn from training logs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use tumorseg::trainer::{self, EpochRecord};

use crate::CliError;

/// `(file stem, y-axis label, log column)` of each image.
pub const CURVES: [(&str, &str, &str); 3] = [
    ("loss", "loss", "loss"),
    ("accuracy", "accuracy", "accuracy"),
    ("dice", "dice", "dice"),
];

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn series(rows: &[EpochRecord], column: &str, label: String) -> Result<Series, CliError> {
    let points = rows
        .iter()
        .map(|r| r.value(column).map(|v| (r.epoch as f64, v)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(tumorseg::Error::from)?;
    Ok(Series { label, points })
}

fn draw(path: &Path, title: &str, y_label: &str, all: &[Series]) -> Result<(), CliError> {
    let fail = |e: &dyn std::fmt::Display| CliError::Plot(format!("{}: {e}", path.display()));
    let points = || all.iter().flat_map(|s| s.points.iter());
    let x_max = points().map(|p| p.0).fold(1.0, f64::max).max(2.0);
    let (mut lo, mut hi) = points()
        .map(|p| p.1)
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(1.0..x_max, (lo - pad)..(hi + pad))
        .map_err(|e| fail(&e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(y_label)
        .draw()
        .map_err(|e| fail(&e))?;
    for (i, s) in all.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| fail(&e))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(|e| fail(&e))?;
    root.present().map_err(|e| fail(&e))
}

/// Distinct display names for the logs, taken from their parent directories.
fn run_labels(csvs: &[PathBuf]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    csvs.iter()
        .enumerate()
        .map(|(i, p)| {
            let base = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run{}", i + 1));
            let mut label = base.clone();
            let mut n = 2;
            while !seen.insert(label.clone()) {
                label = format!("{base}-{n}");
                n += 1;
            }
            label
        })
        .collect()
}

/// One log: train and validation curves per image. Several logs: one
/// validation curve per run per image.
pub fn run(csvs: &[PathBuf], out_dir: &Path) -> Result<(), CliError> {
    if csvs.is_empty() {
        return Err(CliError::Usage("--csv is required".into()));
    }
    let logs = csvs
        .iter()
        .map(|p| trainer::read_csv_log(p))
        .collect::<Result<Vec<_>, _>>()?;
    std::fs::create_dir_all(out_dir).map_err(|source| CliError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let labels = run_labels(csvs);
    for (stem, y_label, column) in CURVES {
        let (file, title, all) = if logs.len() == 1 {
            let all = vec![
                series(&logs[0], column, "train".into())?,
                series(&logs[0], &format!("val_{column}"), "validation".into())?,
            ];
            (format!("{stem}.svg"), format!("{y_label} per epoch"), all)
        } else {
            let all = logs
                .iter()
                .zip(&labels)
                .map(|(rows, label)| series(rows, &format!("val_{column}"), label.clone()))
                .collect::<Result<Vec<_>, _>>()?;
            (
                format!("comparison_{stem}.svg"),
                format!("validation {y_label} per epoch"),
                all,
            )
        };
        let path = out_dir.join(file);
        draw(&path, &title, y_label, &all)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
