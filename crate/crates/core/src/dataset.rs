//! CSV ingestion: one SMILES column plus one label column per task.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::labels::LabelMatrix;
use crate::tokenizer::{tokenize, validate};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot open dataset {path}: {source}")]
    Open {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {column:?} not found; header has {header:?}")]
    MissingColumn { column: String, header: Vec<String> },
    #[error("task column {0:?} listed twice")]
    DuplicateTask(String),
    #[error("no task columns")]
    NoTasks,
    #[error("line {line}, column {column:?}: label {value:?} is not 0, 1 or empty")]
    BadLabel {
        line: u64,
        column: String,
        value: String,
    },
    #[error("no usable rows ({skipped} skipped as invalid SMILES)")]
    NoRows { skipped: usize },
}

/// Molecules that passed lexical validation, with labels and skip counts.
#[derive(Clone, Debug)]
pub struct DatasetTable {
    pub smiles: Vec<String>,
    pub tasks: Vec<String>,
    pub labels: LabelMatrix,
    /// Rows dropped because their SMILES failed lexical validation.
    pub skipped: usize,
    /// Rows dropped for exceeding the model's sequence length.
    pub too_long: usize,
}

fn missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "N/A" | "NaN" | "nan" | "na")
}

fn label(cell: &str) -> Option<f64> {
    match cell {
        "0" | "0.0" => Some(0.0),
        "1" | "1.0" => Some(1.0),
        _ => None,
    }
}

pub fn load_dataset(path: &Path, smiles_column: &str, task_columns: &[String]) -> Result<DatasetTable, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(file, smiles_column, task_columns)
}

/// Header names of a CSV file.
pub fn dataset_columns(path: &Path) -> Result<Vec<String>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    Ok(rdr.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

/// Parses CSV from any reader. An empty `task_columns` selects every column
/// other than the SMILES one, in header order.
pub fn read_dataset<R: Read>(reader: R, smiles_column: &str, task_columns: &[String]) -> Result<DatasetTable, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn {
                column: name.to_string(),
                header: header.clone(),
            })
    };
    let smiles_idx = find(smiles_column)?;
    let tasks: Vec<String> = if task_columns.is_empty() {
        header.iter().filter(|h| *h != smiles_column).cloned().collect()
    } else {
        task_columns.to_vec()
    };
    if tasks.is_empty() {
        return Err(DatasetError::NoTasks);
    }
    for (i, t) in tasks.iter().enumerate() {
        if tasks[..i].contains(t) {
            return Err(DatasetError::DuplicateTask(t.clone()));
        }
    }
    let task_idx = tasks.iter().map(|t| find(t)).collect::<Result<Vec<_>, _>>()?;

    let mut smiles = Vec::new();
    let mut y = Vec::new();
    let mut delta = Vec::new();
    let mut skipped = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let s = record.get(smiles_idx).unwrap_or("").trim();
        // label cells are checked even on rows that end up skipped
        let mut row = Vec::with_capacity(tasks.len());
        for (t, &c) in task_idx.iter().enumerate() {
            let cell = record.get(c).unwrap_or("").trim();
            if missing(cell) {
                row.push(None);
            } else if let Some(v) = label(cell) {
                row.push(Some(v));
            } else {
                return Err(DatasetError::BadLabel {
                    line,
                    column: tasks[t].clone(),
                    value: cell.to_string(),
                });
            }
        }
        if !validate(s).is_empty() {
            skipped += 1;
            continue;
        }
        smiles.push(s.to_string());
        for v in row {
            y.push(v.unwrap_or(0.0));
            delta.push(v.is_some());
        }
    }
    if smiles.is_empty() {
        return Err(DatasetError::NoRows { skipped });
    }
    let labels = LabelMatrix::new(smiles.len(), tasks.len(), y, delta).expect("labels are binary by construction");
    Ok(DatasetTable {
        smiles,
        tasks,
        labels,
        skipped,
        too_long: 0,
    })
}

impl DatasetTable {
    pub fn len(&self) -> usize {
        self.smiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smiles.is_empty()
    }

    /// Drops rows whose token count plus BOS/EOS exceeds `max_len` and
    /// returns how many were dropped.
    pub fn drop_longer_than(&mut self, max_len: usize) -> usize {
        let keep: Vec<usize> = (0..self.smiles.len())
            .filter(|&r| {
                tokenize(&self.smiles[r]).map_or(false, |seq| seq.len_with_specials() <= max_len)
            })
            .collect();
        let dropped = self.smiles.len() - keep.len();
        if dropped > 0 {
            self.smiles = keep.iter().map(|&r| self.smiles[r].clone()).collect();
            self.labels = self.labels.select(&keep);
            self.too_long += dropped;
        }
        dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, tasks: &[&str]) -> Result<DatasetTable, DatasetError> {
        let tasks: Vec<String> = tasks.iter().map(|t| t.to_string()).collect();
        read_dataset(text.as_bytes(), "smiles", &tasks)
    }

    #[test]
    fn missing_cells_are_unlabeled() {
        let t = read("smiles,t1,t2\nCCO,1,\n", &["t1", "t2"]).unwrap();
        assert_eq!(t.labels.column(0), (vec![1.0], vec![true]));
        assert_eq!(t.labels.column(1), (vec![0.0], vec![false]));
        let t = read("smiles,t1\nCCO,NA\nCC,1.0\nC,0.0\n", &[]).unwrap();
        assert_eq!(t.labels.column(0), (vec![0.0, 1.0, 0.0], vec![false, true, true]));
    }

    #[test]
    fn invalid_smiles_are_skipped() {
        let t = read("smiles,t1\nC[NH,1\nCCO,0\n", &["t1"]).unwrap();
        assert_eq!((t.len(), t.skipped), (1, 1));
        assert!(matches!(
            read("smiles,t1\nC[NH,1\n", &["t1"]),
            Err(DatasetError::NoRows { skipped: 1 })
        ));
    }

    #[test]
    fn bad_label_names_line_column_and_value() {
        let err = read("smiles,t1,t2\nCCO,1,0\nCC,0,2\n", &["t1", "t2"]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, DatasetError::BadLabel { line: 3, .. }), "{msg}");
        assert!(msg.contains("\"t2\"") && msg.contains("\"2\""), "{msg}");
    }

    #[test]
    fn missing_columns_are_errors() {
        assert!(matches!(
            read("smiles,t1\nCCO,1\n", &["t9"]),
            Err(DatasetError::MissingColumn { .. })
        ));
        assert!(matches!(
            read_dataset("mol,t1\nCCO,1\n".as_bytes(), "smiles", &[]),
            Err(DatasetError::MissingColumn { .. })
        ));
    }

    #[test]
    fn long_rows_can_be_dropped() {
        let mut t = read("smiles,t1\nCCCCCC,1\nCC,0\n", &["t1"]).unwrap();
        assert_eq!(t.drop_longer_than(5), 1);
        assert_eq!(t.smiles, vec!["CC"]);
        assert_eq!(t.labels.column(0), (vec![0.0], vec![true]));
    }
}
