//! Line charts of metrics columns as standalone SVG.

use std::fmt::Write as _;

use crate::metrics::{CsvError, Table};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlotError {
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("no columns requested")]
    NoColumns,
    #[error("column `{missing}` not found; available: {available}")]
    MissingColumn { missing: String, available: String },
    #[error("the CSV has a header but no data rows")]
    NoData,
}

/// Renders one polyline per column against the first CSV column.
pub fn emit_plot(csv: &str, columns: &[&str]) -> Result<String, PlotError> {
    let table = Table::parse(csv)?;
    if columns.is_empty() {
        return Err(PlotError::NoColumns);
    }
    let series: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| {
            table.column(c).ok_or_else(|| PlotError::MissingColumn {
                missing: c.to_string(),
                available: table.columns.join(", "),
            })
        })
        .collect::<Result<_, _>>()?;
    if table.rows.is_empty() {
        return Err(PlotError::NoData);
    }
    let xs = table.column(&table.columns[0]).expect("first column exists");

    let finite = |v: &&f64| v.is_finite();
    let (x_lo, x_hi) = bounds(xs.iter().filter(finite));
    let (y_lo, y_hi) = bounds(series.iter().flatten().filter(finite));
    let sx = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y_lo) / (y_hi - y_lo) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(svg, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#).unwrap();
    writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#).unwrap();
    let label = |v: f64| format!("{v:.4}");
    writeln!(svg, r#"<text x="{left}" y="{}" font-size="11">{}</text>"#, bottom + 15.0, label(x_lo)).unwrap();
    writeln!(svg, r#"<text x="{right}" y="{}" font-size="11" text-anchor="end">{}</text>"#, bottom + 15.0, label(x_hi)).unwrap();
    writeln!(svg, r#"<text x="{}" y="{bottom}" font-size="11" text-anchor="end">{}</text>"#, left - 4.0, label(y_lo)).unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#, left - 4.0, top + 4.0, label(y_hi)).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(&table.columns[0])
    )
    .unwrap();

    for (i, (name, ys)) in columns.iter().zip(&series).enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        let ly = top + 14.0 * i as f64;
        writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#,
            right - 110.0,
            right - 90.0
        )
        .unwrap();
        writeln!(svg, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, right - 85.0, ly + 4.0, escape(name)).unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "epoch,train_loss,valid_loss\n1,0.7,0.8\n2,0.4,0.6\n";

    #[test]
    fn one_polyline_per_column() {
        let svg = emit_plot(CSV, &["train_loss", "valid_loss"]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
            let points = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
            assert_eq!(points.split(' ').count(), 2);
        }
        assert!(svg.contains("train_loss") && svg.contains("valid_loss"));
    }

    #[test]
    fn deterministic_bytes() {
        assert_eq!(emit_plot(CSV, &["train_loss"]).unwrap(), emit_plot(CSV, &["train_loss"]).unwrap());
    }

    #[test]
    fn errors() {
        match emit_plot(CSV, &["nope"]) {
            Err(PlotError::MissingColumn { available, .. }) => assert!(available.contains("train_loss")),
            other => panic!("{other:?}"),
        }
        assert_eq!(emit_plot("epoch,train_loss\n", &["train_loss"]), Err(PlotError::NoData));
        assert_eq!(emit_plot(CSV, &[]), Err(PlotError::NoColumns));
    }

    #[test]
    fn flat_series_still_renders() {
        let svg = emit_plot("epoch,a\n1,3\n2,3\n", &["a"]).unwrap();
        assert!(!svg.contains("NaN"));
    }
}
