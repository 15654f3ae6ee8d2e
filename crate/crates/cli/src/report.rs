//! Turns result CSVs into text tables and SVG line plots.
//!
//! The CSV kind is recognized by its header: per-type metrics
//! (`type,queries,mrr,...`), sweeps (`value,A_m,A_i,A_n,A_p`) and loss logs
//! (`step,loss` or `epoch,loss`).

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use plotters::prelude::*;
use q2t::eval::{read_report_csv, render_table, EvalReport};

/// Unusable CSV content.
#[derive(Debug)]
pub struct DataError(pub String);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let header = reader.headers()?.iter().map(str::to_string).collect::<Vec<_>>();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    if rows.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(DataError(format!("{}: no rows", path.display())).into());
    }
    Ok(Table { header, rows })
}

fn column(t: &Table, path: &Path, name: &str) -> Result<Vec<f64>> {
    let idx = t
        .header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| DataError(format!("{}: missing column {name}", path.display())))?;
    t.rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cell = r.get(idx).map(String::as_str).unwrap_or("");
            cell.trim().parse::<f64>().map_err(|_| {
                DataError(format!("{}: row {}: {name} {cell:?} is not a number", path.display(), i + 2)).into()
            })
        })
        .collect()
}

fn stem(path: &Path) -> String {
    let file = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(dir) => format!("{}/{file}", dir.to_string_lossy()),
        None => file,
    }
}

fn svg_name(path: &Path, suffix: &str) -> String {
    let s = stem(path).replace(['/', '\\', ' '], "_");
    format!("{s}_{suffix}.svg")
}

/// Draws one line per series against a shared x axis; NaN points are dropped.
fn line_plot(out: &Path, title: &str, x_label: &str, x: &[f64], series: &[(&str, Vec<f64>)]) -> Result<()> {
    let finite = |v: &f64| v.is_finite();
    let ys: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(finite).collect();
    let (x0, x1) = bounds(x.iter().copied().filter(finite));
    let (y0, y1) = bounds(ys.into_iter());
    let root = SVGBackend::new(out, (720, 480)).into_drawing_area();
    let draw = || -> Result<(), Box<dyn std::error::Error + '_>> {
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(x0..x1, y0..y1)?;
        chart.configure_mesh().x_desc(x_label).draw()?;
        for (i, (name, ys)) in series.iter().enumerate() {
            let colour = Palette99::pick(i).to_rgba();
            let points: Vec<(f64, f64)> = x
                .iter()
                .zip(ys)
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|(&a, &b)| (a, b))
                .collect();
            chart
                .draw_series(LineSeries::new(points.clone(), colour.stroke_width(2)))?
                .label(*name)
                .legend(move |(px, py)| PathElement::new(vec![(px, py), (px + 16, py)], colour));
            chart.draw_series(points.into_iter().map(|p| Circle::new(p, 3, colour.filled())))?;
        }
        if series.len() > 1 {
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        }
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| anyhow::anyhow!("plotting {}: {e}", out.display()))
}

/// Plot range padded so that a single point or a flat line stays visible.
fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Renders every input; returns the combined text report, which is also
/// written to `out/report.txt`.
pub fn run(inputs: &[PathBuf], out: &Path) -> Result<String> {
    let mut metrics: Vec<(String, EvalReport)> = Vec::new();
    let mut text = String::new();
    for path in inputs {
        let table = read_table(path)?;
        let head: Vec<&str> = table.header.iter().map(String::as_str).collect();
        match head.as_slice() {
            ["type", "queries", "mrr", ..] => {
                metrics.push((stem(path), read_report_csv(path)?));
            }
            ["value", "A_m", "A_i", "A_n", "A_p"] => {
                let x = column(&table, path, "value")?;
                let names = ["A_m", "A_i", "A_n", "A_p"];
                let series = names
                    .iter()
                    .map(|n| Ok((*n, column(&table, path, n)?.into_iter().map(|v| 100.0 * v).collect::<Vec<_>>())))
                    .collect::<Result<Vec<_>>>()?;
                let _ = writeln!(text, "sweep {}", stem(path));
                let _ = writeln!(text, "{:>10}{:>8}{:>8}{:>8}{:>8}", "value", "A_m", "A_i", "A_n", "A_p");
                for (i, v) in x.iter().enumerate() {
                    let _ = write!(text, "{v:>10}");
                    for (_, s) in &series {
                        if s[i].is_finite() {
                            let _ = write!(text, "{:>8.1}", s[i]);
                        } else {
                            let _ = write!(text, "{:>8}", "-");
                        }
                    }
                    text.push('\n');
                }
                text.push('\n');
                let svg = out.join(svg_name(path, "sweep"));
                line_plot(&svg, &format!("MRR (%) vs {}", stem(path)), "value", &x, &series)?;
            }
            [x_name @ ("step" | "epoch"), "loss"] => {
                let x = column(&table, path, x_name)?;
                let loss = column(&table, path, "loss")?;
                let last = loss.last().copied().unwrap_or(f64::NAN);
                let _ = writeln!(text, "loss {}: {} {x_name}s, final {last:.5}\n", stem(path), x.len());
                let svg = out.join(svg_name(path, "loss"));
                line_plot(&svg, &format!("loss {}", stem(path)), x_name, &x, &[("loss", loss)])?;
            }
            _ => {
                return Err(DataError(format!(
                    "{}: unrecognized header {:?}",
                    path.display(),
                    table.header.join(",")
                ))
                .into())
            }
        }
    }
    if !metrics.is_empty() {
        let table = render_table(&metrics);
        text = format!("MRR (%)\n{table}\n{text}");
    }
    std::fs::write(out.join("report.txt"), &text).with_context(|| format!("writing {}", out.display()))?;
    Ok(text)
}
