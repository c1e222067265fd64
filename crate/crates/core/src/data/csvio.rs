use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcome: String,
    /// Covariate columns in order; `None` takes every other column.
    pub covariates: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(treatment: impl Into<String>, outcome: impl Into<String>) -> Self {
        Self {
            treatment: treatment.into(),
            outcome: outcome.into(),
            covariates: None,
        }
    }

    pub fn with_covariates(mut self, covariates: Vec<String>) -> Self {
        self.covariates = Some(covariates);
        self
    }
}

fn parse_cell(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| {
        Error::InvalidData(format!(
            "non-numeric cell {s:?} in column {col:?} at data row {}",
            row + 1
        ))
    })
}

/// Read a headed CSV file into a [`Dataset`], preserving row order.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::InvalidData(format!("column {name:?} not found in {}", path.display()))
        })
    };
    let t_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let covariates: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t_col && *i != y_col)
            .map(|(_, h)| h.clone())
            .collect(),
    };
    if covariates.is_empty() {
        return Err(Error::InvalidData(
            "schema names no covariate columns".into(),
        ));
    }
    let x_cols = covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut xs = Vec::new();
    let mut zs = Vec::new();
    let mut ys = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let z = parse_cell(&record[t_col], row, &schema.treatment)?;
        if z != 0.0 && z != 1.0 {
            return Err(Error::NonBinaryTreatment { row, value: z });
        }
        zs.push(z);
        ys.push(parse_cell(&record[y_col], row, &schema.outcome)?);
        for (&c, name) in x_cols.iter().zip(&covariates) {
            xs.push(parse_cell(&record[c], row, name)?);
        }
    }
    let n = zs.len();
    let x = DMatrix::from_row_slice(n, covariates.len(), &xs);
    Dataset::new(x, DVector::from_vec(zs), DVector::from_vec(ys), covariates)
}

/// Write a dataset with columns `covariates..., treatment, outcome`.
pub fn write_csv(
    path: impl AsRef<Path>,
    data: &Dataset,
    treatment: &str,
    outcome: &str,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = data.covariate_names.clone();
    header.push(treatment.to_string());
    header.push(outcome.to_string());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", data.z[i]));
        rec.push(format!("{:?}", data.y[i]));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
