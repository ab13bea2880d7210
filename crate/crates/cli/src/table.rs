//! CSV input and output. Inputs need a header row; every cell is numeric.

use std::io::Write;
use std::path::Path;

use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_owned)
            .collect();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let row = record
                .iter()
                .zip(&headers)
                .map(|(cell, name)| {
                    cell.parse::<f64>().map_err(|_| {
                        CliError::Input(format!(
                            "{}: row {}, column {name}: '{cell}' is not a number",
                            path.display(),
                            i + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Table { headers, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has(&self, name: &str) -> bool {
        self.headers.iter().any(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn require(&self, name: &str) -> Result<Vec<f64>, CliError> {
        self.column(name)
            .ok_or_else(|| CliError::Input(format!("missing column '{name}'")))
    }

    /// Columns `prefix1, prefix2, ...`, which must be numbered without gaps.
    fn numbered(&self, prefix: &str) -> Result<Vec<usize>, CliError> {
        let mut found: Vec<(usize, usize)> = self
            .headers
            .iter()
            .enumerate()
            .filter_map(|(j, h)| {
                let idx: usize = h.strip_prefix(prefix)?.parse().ok()?;
                Some((idx, j))
            })
            .collect();
        found.sort_unstable();
        for (want, (got, _)) in (1..).zip(&found) {
            if want != *got {
                return Err(CliError::Input(format!(
                    "columns {prefix}1..{prefix}d must not skip {prefix}{want}"
                )));
            }
        }
        Ok(found.into_iter().map(|(_, j)| j).collect())
    }

    /// Feature vectors from `x1..xd`; `d` may be zero.
    pub fn features(&self) -> Result<Vec<Vec<f64>>, CliError> {
        let cols = self.numbered("x")?;
        Ok(self.rows.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect())
    }

    /// Probability vectors from `p1..pK`, or `None` when absent.
    pub fn probabilities(&self) -> Result<Option<Vec<Vec<f64>>>, CliError> {
        let cols = self.numbered("p")?;
        if cols.is_empty() {
            return Ok(None);
        }
        Ok(Some(
            self.rows.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect(),
        ))
    }

    /// 1-based integer labels from the `label` column.
    pub fn labels(&self) -> Result<Vec<usize>, CliError> {
        self.require("label")?
            .into_iter()
            .map(|v| {
                if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
                    Ok(v as usize)
                } else {
                    Err(CliError::Input(format!("label {v} is not a positive integer")))
                }
            })
            .collect()
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn write_csv(out: &mut dyn Write, headers: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(headers).map_err(io_err)?;
    for r in rows {
        w.write_record(r).map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::Input(e.to_string()))?;
    Ok(())
}

fn io_err(e: csv::Error) -> CliError {
    CliError::Input(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e300, -2.5e-300, 4.0, f64::INFINITY, f64::NEG_INFINITY] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn numbered_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "x2,y,x1,label\n1,2,3,4\n").unwrap();
        let t = Table::read(&path).unwrap();
        assert_eq!(t.features().unwrap(), vec![vec![3.0, 1.0]]);
        assert_eq!(t.labels().unwrap(), vec![4]);
        std::fs::write(&path, "x2,y\n1,2\n").unwrap();
        assert!(Table::read(&path).unwrap().features().is_err());
        std::fs::write(&path, "y\nabc\n").unwrap();
        assert!(Table::read(&path).is_err());
    }
}
