//! Per-epoch metrics and their CSV form.
//!
//! Columns: `epoch,step,train_loss,train_acc,valid_loss,valid_acc,
//! expected_skip,p_layer_1,…,p_layer_L,wall_ms`. Comma separated, `.`
//! decimals, LF line endings. Reals use the shortest representation that
//! parses back to the same `f64`.

use std::fmt::Write as _;

pub const LEADING: [&str; 7] = [
    "epoch",
    "step",
    "train_loss",
    "train_acc",
    "valid_loss",
    "valid_acc",
    "expected_skip",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CsvError {
    #[error("empty input")]
    Empty,
    #[error("header column {index} is empty or duplicated: {name:?}")]
    BadHeader { index: usize, name: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    FieldCount { line: usize, expected: usize, found: usize },
    #[error("line {line}, column {column}: cannot parse {text:?} as a number")]
    Number { line: usize, column: String, text: String },
    #[error("header does not follow the metrics schema: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
    pub expected_skip: f64,
    pub levels: Vec<f64>,
    pub wall_ms: u64,
}

pub fn header(layers: usize) -> String {
    let mut cols: Vec<String> = LEADING.iter().map(|s| s.to_string()).collect();
    cols.extend((1..=layers).map(|l| format!("p_layer_{l}")));
    cols.push("wall_ms".into());
    cols.join(",")
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.train_loss,
            self.train_acc,
            self.valid_loss,
            self.valid_acc,
            self.expected_skip
        );
        for p in &self.levels {
            write!(s, ",{p}").unwrap();
        }
        write!(s, ",{}", self.wall_ms).unwrap();
        s
    }
}

/// A parsed numeric CSV with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Table, CsvError> {
        let mut lines = text.lines();
        let head = lines.next().ok_or(CsvError::Empty)?;
        let columns: Vec<String> = head.split(',').map(|s| s.trim().to_string()).collect();
        for (index, name) in columns.iter().enumerate() {
            if name.is_empty() || columns[..index].contains(name) {
                return Err(CsvError::BadHeader { index, name: name.clone() });
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(CsvError::FieldCount {
                    line: i + 2,
                    expected: columns.len(),
                    found: fields.len(),
                });
            }
            let row = fields
                .iter()
                .zip(&columns)
                .map(|(f, c)| {
                    f.trim().parse::<f64>().map_err(|_| CsvError::Number {
                        line: i + 2,
                        column: c.clone(),
                        text: f.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push(row);
        }
        Ok(Table { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Number of `p_layer_*` columns when the header follows the schema.
    pub fn metrics_layers(&self) -> Result<usize, CsvError> {
        let n = self.columns.len();
        if n < LEADING.len() + 1 || self.columns[..LEADING.len()] != LEADING || self.columns[n - 1] != "wall_ms" {
            return Err(CsvError::Schema(self.columns.join(",")));
        }
        let layers = n - LEADING.len() - 1;
        for l in 1..=layers {
            if self.columns[LEADING.len() + l - 1] != format!("p_layer_{l}") {
                return Err(CsvError::Schema(self.columns.join(",")));
            }
        }
        Ok(layers)
    }

    pub fn to_rows(&self) -> Result<Vec<MetricsRow>, CsvError> {
        let layers = self.metrics_layers()?;
        Ok(self
            .rows
            .iter()
            .map(|r| MetricsRow {
                epoch: r[0] as u64,
                step: r[1] as u64,
                train_loss: r[2],
                train_acc: r[3],
                valid_loss: r[4],
                valid_acc: r[5],
                expected_skip: r[6],
                levels: r[7..7 + layers].to_vec(),
                wall_ms: r[7 + layers] as u64,
            })
            .collect())
    }
}

pub fn render(layers: usize, rows: &[MetricsRow]) -> String {
    let mut out = header(layers);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Per-epoch medians across seeds. Epoch `e` uses every seed that logged it.
pub fn aggregate(layers: usize, runs: &[Vec<MetricsRow>]) -> Vec<MetricsRow> {
    let longest = runs.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let present: Vec<&MetricsRow> = runs.iter().filter_map(|r| r.get(i)).collect();
            let med = |f: &dyn Fn(&MetricsRow) -> f64| median(present.iter().map(|r| f(r)).collect());
            MetricsRow {
                epoch: present[0].epoch,
                step: med(&|r| r.step as f64).round() as u64,
                train_loss: med(&|r| r.train_loss),
                train_acc: med(&|r| r.train_acc),
                valid_loss: med(&|r| r.valid_loss),
                valid_acc: med(&|r| r.valid_acc),
                expected_skip: med(&|r| r.expected_skip),
                levels: (0..layers).map(|l| med(&|r| r.levels[l])).collect(),
                wall_ms: med(&|r| r.wall_ms as f64).round() as u64,
            }
        })
        .collect()
}
