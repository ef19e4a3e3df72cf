//! Chart emission: loss and accuracy curves as standalone SVG files.
//!
//! The metrics CSV is the only input; several files overlay as one series
//! per file, named by file stem. Charts are plain polylines with a box
//! frame and min/max tick labels, good enough to eyeball convergence and
//! diff runs without a plotting stack.

use crate::error::{CliError, CliResult};
use std::path::{Path, PathBuf};

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 54.0;

fn parse_metrics(path: &Path, wanted: &[&str]) -> CliResult<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| CliError::Config(format!("{}: empty metrics file", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut indices = Vec::with_capacity(wanted.len());
    for name in wanted {
        let idx = columns.iter().position(|c| c == name).ok_or_else(|| {
            CliError::Config(format!("{}: column `{name}` missing", path.display()))
        })?;
        indices.push(idx);
    }
    let mut rows = Vec::new();
    for (row_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let mut row = Vec::with_capacity(indices.len());
        for (&idx, name) in indices.iter().zip(wanted) {
            let field = fields.get(idx).ok_or_else(|| {
                CliError::Config(format!(
                    "{}: data row {} has no `{name}` field",
                    path.display(),
                    row_no + 1
                ))
            })?;
            let v: f64 = field.trim().parse().map_err(|_| {
                CliError::Config(format!(
                    "{}: data row {}: `{field}` in column `{name}` is not numeric",
                    path.display(),
                    row_no + 1
                ))
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Config(format!("{}: no metric rows to plot", path.display())));
    }
    Ok(rows)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn svg_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (x_min, x_max) = bounds(xs);
    let (y_min, y_max) = bounds(ys);
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + (x - x_min) / x_span * plot_w;
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_min) / y_span * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        WIDTH / 2.0
    ));
    svg.push_str(&format!(
        "  <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"#444\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">round</text>\n",
        WIDTH / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    for (v, anchor) in [(x_min, "start"), (x_max, "end")] {
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\">{}</text>\n",
            sx(v),
            HEIGHT - MARGIN + 18.0,
            trim_num(v)
        ));
    }
    for v in [y_min, y_max] {
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 6.0,
            sy(v) + 4.0,
            trim_num(v)
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            MARGIN + 8.0,
            MARGIN + 16.0 + 16.0 * i as f64,
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn trim_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.4}")
    }
}

/// Renders `loss.svg` (always) and `acc.svg` (when any run has accuracy
/// data) under `out_dir`, one series per input CSV. Returns written paths.
pub fn emit_plots(csvs: &[PathBuf], out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    if csvs.is_empty() {
        return Err(CliError::Config("no metrics files to plot".into()));
    }
    let mut loss_series = Vec::new();
    let mut acc_series = Vec::new();
    for path in csvs {
        let rows = parse_metrics(path, &["round", "loss", "acc"])?;
        let name = stem(path);
        loss_series.push(Series {
            name: name.clone(),
            points: rows.iter().map(|r| (r[0], r[1])).collect(),
        });
        let acc_points: Vec<(f64, f64)> =
            rows.iter().filter(|r| r[2] >= 0.0).map(|r| (r[0], r[2])).collect();
        if !acc_points.is_empty() {
            acc_series.push(Series { name, points: acc_points });
        }
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    let loss_path = out_dir.join("loss.svg");
    std::fs::write(&loss_path, svg_chart("training loss", "loss", &loss_series))
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", loss_path.display())))?;
    written.push(loss_path);
    if !acc_series.is_empty() {
        let acc_path = out_dir.join("acc.svg");
        std::fs::write(&acc_path, svg_chart("eval accuracy", "accuracy", &acc_series))
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", acc_path.display())))?;
        written.push(acc_path);
    }
    Ok(written)
}
