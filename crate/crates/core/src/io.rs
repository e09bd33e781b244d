//! CSV reading and writing for datasets and feature matrices. Columns are
//! picked by name through a role manifest; lines starting with `#` are
//! comments.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, RawDataset};
use crate::error::{CilError, Result};
use crate::prior::FeatureMatrix;

/// Which CSV columns hold the outcome, the treatments and the controls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatments: Vec<String>,
    /// Empty means every column not named as outcome or treatment.
    pub controls: Vec<String>,
}

impl ColumnRoles {
    pub fn new(outcome: impl Into<String>, treatments: Vec<String>, controls: Vec<String>) -> Self {
        Self { outcome: outcome.into(), treatments, controls }
    }
}

fn csv_error(e: csv::Error) -> CilError {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(io) => CilError::Io(io.to_string()),
        _ => CilError::Malformed { line, message: e.to_string() },
    }
}

/// Reads a headered CSV into an unvalidated dataset.
pub fn read_dataset_csv<R: Read>(reader: R, roles: &ColumnRoles) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_owned).collect();
    let mut position = HashMap::new();
    for (i, name) in header.iter().enumerate() {
        if position.insert(name.as_str(), i).is_some() {
            return Err(CilError::Malformed { line: 1, message: format!("duplicate column '{name}'") });
        }
    }
    let find = |name: &str| position.get(name).copied().ok_or_else(|| CilError::UnknownColumn(name.to_owned()));
    let y_col = find(&roles.outcome)?;
    if roles.treatments.is_empty() {
        return Err(CilError::InvalidParameter("at least one treatment column is required".into()));
    }
    let d_cols = roles.treatments.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    let controls: Vec<String> = if roles.controls.is_empty() {
        header
            .iter()
            .filter(|h| **h != roles.outcome && !roles.treatments.contains(h))
            .cloned()
            .collect()
    } else {
        roles.controls.clone()
    };
    let x_cols = controls.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    let mut roles_seen = vec![y_col];
    roles_seen.extend(&d_cols);
    roles_seen.extend(&x_cols);
    let mut sorted = roles_seen.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != roles_seen.len() {
        return Err(CilError::InvalidParameter("a column is assigned more than one role".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(roles_seen.len());
        for &c in &roles_seen {
            let field = record.get(c).unwrap_or("");
            let value: f64 = field.parse().map_err(|_| CilError::Malformed {
                line,
                message: format!("column '{}': cannot parse '{field}' as a number", header[c]),
            })?;
            row.push(value);
        }
        rows.push(row);
    }
    let n = rows.len();
    let t = d_cols.len();
    let j = x_cols.len();
    let y = DVector::from_fn(n, |i, _| rows[i][0]);
    let d = DMatrix::from_fn(n, t, |i, c| rows[i][1 + c]);
    let x = DMatrix::from_fn(n, j, |i, c| rows[i][1 + t + c]);
    let mut raw = RawDataset::new(y, d, x);
    raw.treatment_names = Some(roles.treatments.clone());
    raw.control_names = Some(controls);
    Ok(raw)
}

/// Writes outcome, treatments and controls (in that order) with a header
/// row. Values are written in shortest round-trip form.
pub fn write_dataset_csv<W: Write>(writer: W, data: &Dataset, outcome_name: &str) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![outcome_name.to_owned()];
    header.extend(data.treatment_names().iter().cloned());
    header.extend(data.control_names().iter().cloned());
    wtr.write_record(&header).map_err(csv_error)?;
    for i in 0..data.n() {
        let mut row = vec![data.y()[i].to_string()];
        row.extend((0..data.t()).map(|t| data.d()[(i, t)].to_string()));
        row.extend((0..data.j()).map(|j| data.x()[(i, j)].to_string()));
        wtr.write_record(&row).map_err(csv_error)?;
    }
    wtr.flush().map_err(|e| CilError::Io(e.to_string()))
}

/// Roles matching the layout produced by [`write_dataset_csv`].
pub fn roles_for(data: &Dataset, outcome_name: &str) -> ColumnRoles {
    ColumnRoles::new(outcome_name, data.treatment_names().to_vec(), data.control_names().to_vec())
}

/// Feature matrix as CSV: one row per control, one column per treatment.
pub fn feature_matrix_csv(features: &FeatureMatrix, control_names: &[String], treatment_names: &[String]) -> Result<String> {
    if control_names.len() != features.j() || treatment_names.len() != features.t() {
        return Err(CilError::DimensionMismatch("feature matrix and column names disagree".into()));
    }
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["control".to_owned()];
    header.extend(treatment_names.iter().cloned());
    wtr.write_record(&header).map_err(csv_error)?;
    for (j, name) in control_names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..features.t()).map(|t| features.values()[(j, t)].to_string()));
        wtr.write_record(&row).map_err(csv_error)?;
    }
    let bytes = wtr.into_inner().map_err(|e| CilError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CilError::Io(e.to_string()))
}
