use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::RunError;

pub const VERSION: &str = concat!("ldpnn ", env!("CARGO_PKG_VERSION"));

/// One CSV cell. Missing values are written as an empty field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Absent,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) if v.is_infinite() => if *v > 0.0 { "inf".into() } else { "-inf".into() },
            Cell::Num(v) if v.is_nan() => "nan".into(),
            // Shortest representation that round-trips.
            Cell::Num(v) => format!("{v:?}"),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Absent => String::new(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Absent, Cell::Num)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Output directory plus the provenance written next to every file.
#[derive(Debug, Clone)]
pub struct Sink {
    dir: PathBuf,
    config_hash: String,
    seed: u64,
    experiment: String,
    written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: &Path, config_hash: String, seed: u64, experiment: &str) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash,
            seed,
            experiment: experiment.to_string(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    /// Writes `name` (a `.csv` file) and its `.meta.json` sidecar.
    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<Cell>]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let io = |e: csv::Error| RunError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(io)?;
        w.write_record(header).map_err(io)?;
        for row in rows {
            debug_assert_eq!(row.len(), header.len());
            w.write_record(row.iter().map(Cell::render)).map_err(io)?;
        }
        w.flush().map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(path);
        let stem = name.strip_suffix(".csv").unwrap_or(name);
        let meta = json!({
            "file": name,
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": VERSION,
            "columns": header,
            "rows": rows.len(),
        });
        self.json(&format!("{stem}.meta.json"), &meta)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value).map_err(|e| RunError::Io(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }
}
