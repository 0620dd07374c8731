//! File helpers: JSON documents and the headerless CSV interchange format
//! for logits (one sample per row) and labels (one integer per row).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::prob::{LabelVec, LogitMatrix};

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader(path)?.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!("{}: row {}: bad number {field:?}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::shape(format!("{}: ragged rows", path.display())));
    }
    Array2::from_shape_vec((rows.len(), k), rows.into_iter().flatten().collect())
        .map_err(|e| Error::shape(e.to_string()))
}

pub fn read_logits_csv(path: impl AsRef<Path>) -> Result<LogitMatrix> {
    LogitMatrix::new(read_matrix_csv(path)?)
}

pub fn read_labels_csv(path: impl AsRef<Path>, k: usize) -> Result<LabelVec> {
    let path = path.as_ref();
    let mut labels = Vec::new();
    for (i, record) in reader(path)?.records().enumerate() {
        let record = record?;
        if record.len() != 1 {
            return Err(Error::shape(format!(
                "{}: row {} has {} columns, expected 1",
                path.display(),
                i + 1,
                record.len()
            )));
        }
        labels.push(record[0].parse::<usize>().map_err(|_| {
            Error::InvalidInput(format!("{}: row {}: bad label {:?}", path.display(), i + 1, &record[0]))
        })?);
    }
    LabelVec::new(labels, k)
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.outer_iter() {
        let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}

pub fn write_labels_csv(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 3);
    for y in labels {
        out.push_str(&y.to_string());
        out.push('\n');
    }
    write_text(path.as_ref(), &out)
}
