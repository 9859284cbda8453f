//! Result tables and atomic file output.
//!
//! Tabular files are tab-separated with a `# tempscale schema=<name>
//! version=<n>` first line. Structured files are newline-delimited JSON whose
//! first record is `{"schema": <name>, "version": <n>}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use tempscale_core::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Tabular,
    Structured,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Tabular => "tsv",
            Format::Structured => "ndjson",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Num(f64),
    Text(String),
    Missing,
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

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        if v.is_finite() {
            Cell::Num(v)
        } else {
            Cell::Missing
        }
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Missing, Cell::from)
    }
}

impl From<Option<u64>> for Cell {
    fn from(v: Option<u64>) -> Self {
        v.map_or(Cell::Missing, Cell::Int)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Cell {
    fn tsv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Num(v) => v.to_string(),
            Cell::Text(s) => s.replace(['\t', '\n'], " "),
            Cell::Missing => "NA".into(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => json!(v),
            Cell::Num(v) => json!(v),
            Cell::Text(s) => json!(s),
            Cell::Missing => Value::Null,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub schema: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(schema: &'static str, columns: &[&'static str]) -> Self {
        Self {
            schema,
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: Format) -> String {
        let mut out = String::new();
        match format {
            Format::Tabular => {
                out.push_str(&header_line(self.schema));
                out.push_str(&self.columns.join("\t"));
                out.push('\n');
                for row in &self.rows {
                    let cells: Vec<String> = row.iter().map(Cell::tsv).collect();
                    out.push_str(&cells.join("\t"));
                    out.push('\n');
                }
            }
            Format::Structured => {
                out.push_str(&json!({"schema": self.schema, "version": SCHEMA_VERSION}).to_string());
                out.push('\n');
                for row in &self.rows {
                    let obj: Map<String, Value> = self
                        .columns
                        .iter()
                        .zip(row)
                        .map(|(c, v)| (c.to_string(), v.json()))
                        .collect();
                    out.push_str(&Value::Object(obj).to_string());
                    out.push('\n');
                }
            }
        }
        out
    }
}

pub fn header_line(schema: &str) -> String {
    format!("# tempscale schema={schema} version={SCHEMA_VERSION}\n")
}

/// Pretty JSON document wrapping `body` with schema metadata.
pub fn json_document(schema: &str, body: impl serde::Serialize) -> Result<String> {
    let body = serde_json::to_value(body).map_err(|e| Error::Invariant(e.to_string()))?;
    let doc = json!({"schema": schema, "version": SCHEMA_VERSION, "data": body});
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| Error::Invariant(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Output directory; every file is written once via a temporary sibling and
/// a rename.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
    format: Format,
}

impl OutDir {
    pub fn create(root: &Path, format: Format) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            format,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_table(&self, stem: &str, table: &Table) -> Result<PathBuf> {
        let path = self.path(&format!("{stem}.{}", self.format.extension()));
        write_atomic(&path, table.render(self.format).as_bytes())?;
        Ok(path)
    }

    pub fn write_json(&self, name: &str, schema: &str, body: impl serde::Serialize) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, json_document(schema, body)?.as_bytes())?;
        Ok(path)
    }

    pub fn write_raw(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        Ok(path)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(())
}
