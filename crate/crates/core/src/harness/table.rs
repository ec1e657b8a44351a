use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Labelled rows of numbers, written as CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultTable {
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ResultTable {
    pub fn new(row_header: &str, columns: &[&str]) -> Self {
        ResultTable {
            row_header: row_header.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let label = label.into();
        if values.len() != self.columns.len() {
            return Err(Error::shape("table row", &[self.columns.len()], &[values.len()]));
        }
        if self.rows.iter().any(|(l, _)| *l == label) {
            return Err(Error::Invalid(format!("duplicate row label `{label}`")));
        }
        self.rows.push((label, values));
        Ok(())
    }

    pub fn get(&self, row: &str, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|(l, _)| l == row).map(|(_, v)| v[c])
    }

    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.rows.iter().map(|(_, v)| v[c]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "{}", self.row_header)?;
        for c in &self.columns {
            write!(out, ",{c}")?;
        }
        writeln!(out)?;
        for (label, values) in &self.rows {
            write!(out, "{label}")?;
            for v in values {
                write!(out, ",{v:e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}
