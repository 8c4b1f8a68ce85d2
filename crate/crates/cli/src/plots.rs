//! Accuracy and Jaccard curves over slices, drawn from `curves.csv`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use tracing::warn;

use crate::error::{CliError, Result};
use crate::output::write_csv_atomic;

pub const ACCURACY_PLOT: &str = "accuracy_vs_slice.png";
pub const JACCARD_PLOT: &str = "jaccard_vs_slice.png";
/// The exact points drawn in both plots, one row per point.
pub const PLOT_DATA: &str = "plot_data.csv";

const COLORS: [RGBColor; 6] = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];

/// Series per loss mode: `(slice, value)` in slice order.
pub type Series = BTreeMap<String, Vec<(usize, f64)>>;

/// Reads accuracy and mean Jaccard series from a curves file. Rows with an
/// empty Jaccard value are left out of the Jaccard series.
pub fn read_curves(path: &Path) -> Result<(Series, Series)> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Plot(format!("{} has no `{name}` column", path.display())))
    };
    let (loss, slice, acc, jac) = (col("loss")?, col("slice")?, col("accuracy")?, col("avg_jaccard")?);
    let mut accuracy = Series::new();
    let mut jaccard = Series::new();
    for row in reader.records() {
        let row = row?;
        let parse = |i: usize| -> Result<Option<f64>> {
            let v = &row[i];
            if v.is_empty() {
                return Ok(None);
            }
            v.parse().map(Some).map_err(|_| CliError::Plot(format!("bad number `{v}`")))
        };
        let name = row[loss].to_string();
        let s: usize = row[slice]
            .parse()
            .map_err(|_| CliError::Plot(format!("bad slice `{}`", &row[slice])))?;
        if let Some(a) = parse(acc)? {
            accuracy.entry(name.clone()).or_default().push((s, a));
        }
        if let Some(j) = parse(jac)? {
            jaccard.entry(name).or_default().push((s, j));
        }
    }
    for series in [&mut accuracy, &mut jaccard] {
        for points in series.values_mut() {
            points.sort_by_key(|p| p.0);
        }
    }
    Ok((accuracy, jaccard))
}

fn draw(path: &Path, series: &Series) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| CliError::Plot(e.to_string());
    let max_slice = series
        .values()
        .flat_map(|p| p.iter().map(|q| q.0))
        .max()
        .unwrap_or(1)
        .max(2);
    let root = BitMapBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(1f64..max_slice as f64, 0f64..1f64)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_labels(0)
        .y_labels(0)
        .light_line_style(WHITE.mix(0.0))
        .draw()
        .map_err(|e| err(&e))?;
    for (i, points) in series.values().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(
                points.iter().map(|&(s, v)| (s as f64, v)),
                color.stroke_width(2),
            ))
            .map_err(|e| err(&e))?;
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// Draws both plots next to `curves` in `out_dir` and writes the plotted
/// points to [`PLOT_DATA`]. An empty curves file only logs a warning.
pub fn emit_plots(curves: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (accuracy, jaccard) = read_curves(curves)?;
    if accuracy.is_empty() {
        warn!(path = %curves.display(), "no curve rows, nothing to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = vec![["plot", "loss", "slice", "value"].map(String::from).to_vec()];
    let mut files = Vec::new();
    for (name, series) in [(ACCURACY_PLOT, &accuracy), (JACCARD_PLOT, &jaccard)] {
        if series.is_empty() {
            warn!(plot = name, "no values to plot");
            continue;
        }
        let path = out_dir.join(name);
        draw(&path, series)?;
        files.push(path);
        for (loss, points) in series {
            for &(s, v) in points {
                rows.push(vec![name.to_string(), loss.clone(), s.to_string(), saliencytune::trainer::fmt(v)]);
            }
        }
    }
    let data = out_dir.join(PLOT_DATA);
    write_csv_atomic(&data, &rows)?;
    files.push(data);
    Ok(files)
}
