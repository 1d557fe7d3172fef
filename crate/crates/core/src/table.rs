use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// A one-parameter grid-search result, written as CSV `param,value,rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub param: String,
    pub rows: Vec<(String, f64)>,
}

impl GridTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,value,rank\n");
        for (value, rank) in &self.rows {
            let _ = writeln!(out, "{},{},{}", self.param, value, rank);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
