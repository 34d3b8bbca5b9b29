//! Versioned CSV/JSON output with the run configuration embedded.

use std::io::{self, Write};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Bool(bool),
    Empty,
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u32> for Cell {
    fn from(v: u32) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// Shortest round-trip form; infinities are spelled out so log-domain
/// zeros stay readable.
pub fn fmt_float(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".into()
    } else if x == f64::INFINITY {
        "inf".into()
    } else {
        format!("{x:?}")
    }
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(x) => fmt_float(*x),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => json!(v),
            Cell::Float(x) if x.is_finite() => json!(x),
            Cell::Float(x) => json!(fmt_float(*x)),
            Cell::Text(s) => json!(s),
            Cell::Bool(b) => json!(b),
            Cell::Empty => Value::Null,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
    /// Extra `#key=value` header lines (CSV) or top-level fields (JSON).
    pub notes: Vec<(&'static str, String)>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Table {
            columns: columns.to_vec(),
            ..Table::default()
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn note(&mut self, key: &'static str, value: impl ToString) {
        self.notes.push((key, value.to_string()));
    }
}

pub fn config_hash(config: &Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the header and the table body.
pub fn write_table<W: Write>(
    mut w: W,
    format: Format,
    config: &Value,
    table: &Table,
) -> io::Result<()> {
    let hash = config_hash(config);
    match format {
        Format::Csv => {
            writeln!(w, "#schema={SCHEMA}")?;
            writeln!(w, "#config={config}")?;
            writeln!(w, "#config_hash={hash}")?;
            for (k, v) in &table.notes {
                writeln!(w, "#{k}={v}")?;
            }
            let mut out = csv::Writer::from_writer(&mut w);
            out.write_record(&table.columns)?;
            for row in &table.rows {
                out.write_record(row.iter().map(Cell::text))?;
            }
            out.flush()?;
        }
        Format::Json => {
            let rows: Vec<Value> = table
                .rows
                .iter()
                .map(|row| {
                    let obj: Map<String, Value> = table
                        .columns
                        .iter()
                        .zip(row)
                        .map(|(c, v)| (c.to_string(), v.json()))
                        .collect();
                    Value::Object(obj)
                })
                .collect();
            let mut doc = json!({
                "schema": SCHEMA,
                "config": config,
                "config_hash": hash,
                "rows": rows,
            });
            for (k, v) in &table.notes {
                doc[*k] = json!(v);
            }
            serde_json::to_writer_pretty(&mut w, &doc)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Header lines for plain-text outputs such as sampled codes.
pub fn write_text_header<W: Write>(mut w: W, config: &Value) -> io::Result<()> {
    writeln!(w, "#schema={SCHEMA}")?;
    writeln!(w, "#config={config}")?;
    writeln!(w, "#config_hash={}", config_hash(config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        assert_eq!(fmt_float(-1.0), "-1.0");
        assert_eq!(fmt_float(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_float(0.1).parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["n", "A"]);
        t.push(vec![1usize.into(), Cell::Text("1".into())]);
        let mut buf = Vec::new();
        write_table(&mut buf, Format::Csv, &json!({"x": 1}), &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "#schema=1");
        assert_eq!(lines[3], "n,A");
        assert_eq!(lines[4], "1,1");
    }

    #[test]
    fn hash_depends_on_config() {
        assert_ne!(config_hash(&json!({"a": 1})), config_hash(&json!({"a": 2})));
        assert_eq!(config_hash(&json!({"a": 1})).len(), 16);
    }
}
