//! Headerless CSV matrices (one row per line) and 1-based label files.

use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::DMatrix;

pub fn read_matrix(path: &Path) -> anyhow::Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        let row = record
            .iter()
            .map(|field| field.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}: line {}: not a number", path.display(), i + 1))?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                bail!(
                    "{}: line {} has {} values, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    first.len()
                );
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{}: no rows", path.display());
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.into_iter().flatten(),
    ))
}

/// Labels are 1-based on disk and 0-based in memory.
pub fn read_labels(path: &Path) -> anyhow::Result<Vec<usize>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            let v: usize = line
                .trim()
                .parse()
                .with_context(|| format!("{}: line {}: not a label", path.display(), i + 1))?;
            if v == 0 {
                bail!("{}: line {}: labels start at 1", path.display(), i + 1);
            }
            Ok(v - 1)
        })
        .collect()
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
