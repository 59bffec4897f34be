//! Renders training logs and evaluation summaries as SVG charts.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use plotters::prelude::*;

use crate::exit::{Failure, Kind};

/// A parsed CSV: header plus numeric-or-text cells.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .column(name)
            .ok_or_else(|| Failure::new(Kind::Usage, format!("missing column `{name}`")))?;
        self.rows
            .iter()
            .map(|r| {
                r[idx]
                    .parse::<f64>()
                    .map_err(|_| Failure::new(Kind::Usage, format!("non-numeric `{name}` value `{}`", r[idx])).into())
            })
            .collect()
    }
}

fn read_table(path: &Path) -> Result<Table> {
    if !path.exists() {
        return Err(Failure::new(Kind::Io, format!("cannot read {}: no such file", path.display())).into());
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Failure::new(Kind::Io, format!("cannot read {}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Failure::new(Kind::Usage, format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(|e| Failure::new(Kind::Usage, format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(Failure::new(Kind::Usage, format!("{}: no rows", path.display())).into());
    }
    Ok(Table { header, rows })
}

fn range(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn line_chart(out: &Path, title: &str, x_label: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> Result<()> {
    let root = SVGBackend::new(out, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let (y0, y1) = range(&all);
    let (x0, x1) = range(xs);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)?;
    chart.configure_mesh().x_desc(x_label).draw()?;
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(xs.iter().copied().zip(ys.iter().copied()), color.stroke_width(2)))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw()?;
    root.present()?;
    Ok(())
}

fn bar_chart(out: &Path, title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    let root = SVGBackend::new(out, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let n = labels.len();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..n as f64, 0f64..1.05f64)?;
    let names = labels.to_vec();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&move |x| {
            let i = x.floor() as usize;
            if (x - x.floor() - 0.5).abs() < 0.26 && i < names.len() {
                names[i].clone()
            } else {
                String::new()
            }
        })
        .y_desc("mean Dice")
        .draw()?;
    chart.draw_series(values.iter().enumerate().map(|(i, &v)| {
        Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, v)], BLUE.mix(0.6).filled())
    }))?;
    root.present()?;
    Ok(())
}

/// Renders each input CSV and returns `(output file, row count)` pairs.
pub fn render(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<(PathBuf, usize)>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Failure::new(Kind::Io, format!("cannot create {}: {e}", out_dir.display())))?;
    let mut written = Vec::new();
    for input in inputs {
        let table = read_table(input)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let out = out_dir.join(format!("{stem}.svg"));
        if table.column("total").is_some() && table.column("step").is_some() {
            let xs = table.numbers("step")?;
            let series = ["total", "seg", "rec"]
                .iter()
                .map(|c| Ok((*c, table.numbers(c)?)))
                .collect::<Result<Vec<_>>>()?;
            line_chart(&out, "training loss", "step", &xs, &series)
        } else if table.column("epoch").is_some() && table.column("mean_dice").is_some() {
            let xs = table.numbers("epoch")?;
            let series = vec![("mean_dice", table.numbers("mean_dice")?), ("mean_iou", table.numbers("mean_iou")?)];
            line_chart(&out, "validation", "epoch", &xs, &series)
        } else if let (Some(d), Some(_)) = (table.column("domain"), table.column("mean_dice")) {
            let labels: Vec<String> = table.rows.iter().map(|r| r[d].clone()).collect();
            bar_chart(&out, "mean Dice per domain", &labels, &table.numbers("mean_dice")?)
        } else {
            Err(Failure::new(
                Kind::Usage,
                format!("{}: unrecognised columns {:?}", input.display(), table.header),
            )
            .into())
        }
        .with_context(|| format!("rendering {}", input.display()))?;
        written.push((out, table.rows.len()));
    }
    Ok(written)
}
