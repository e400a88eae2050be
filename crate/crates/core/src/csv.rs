//! Minimal CSV output: header row, LF line endings, floats with 17
//! significant digits.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, SipError};

/// Formats a float with 17 significant digits in scientific notation.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV cell.
pub enum Cell<'a> {
    Float(f64),
    Int(u64),
    Text(&'a str),
}

impl Cell<'_> {
    fn render(&self) -> String {
        match self {
            Cell::Float(v) => fmt_f64(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s.to_string(),
        }
    }
}

pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| SipError::io(path, e))?;
        let mut w = CsvWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns: header.len(),
        };
        w.line(&header.join(","))?;
        Ok(w)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        self.out
            .write_all(text.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| SipError::io(&self.path, e))
    }

    pub fn row(&mut self, values: &[f64]) -> Result<()> {
        let cells: Vec<Cell> = values.iter().map(|v| Cell::Float(*v)).collect();
        self.cells(&cells)
    }

    pub fn cells(&mut self, cells: &[Cell]) -> Result<()> {
        if cells.len() != self.columns {
            return Err(SipError::contract(format!(
                "csv row has {} cells, header has {}",
                cells.len(),
                self.columns
            )));
        }
        let text: Vec<String> = cells.iter().map(Cell::render).collect();
        self.line(&text.join(","))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| SipError::io(&self.path, e))
    }
}
