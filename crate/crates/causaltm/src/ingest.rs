//! CSV ingestion into a [`DataSet`], with level maps for categorical columns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use causaltm_core::data::{Column, DataError, DataSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("row {row}: missing value in column `{column}`")]
    Missing { row: usize, column: String },
    #[error("row {row}: column `{column}` must be 0 or 1, found `{value}`")]
    NotBinary { row: usize, column: String, value: String },
    #[error("row {row}: column `{column}` is not numeric: `{value}`")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row}: time `{value}` must be positive")]
    NonPositiveTime { row: usize, value: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which columns to read and how.
#[derive(Debug, Clone, PartialEq)]
pub struct Roles {
    pub time: String,
    pub status: String,
    pub treatment: String,
    /// Other columns to load.
    pub covariates: Vec<String>,
    /// Covariates to level-code.
    pub categorical: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub data: DataSet,
    /// Level labels of each categorical column, code order.
    pub levels: BTreeMap<String, Vec<String>>,
}

/// Level labels sorted numerically when they all parse as numbers, otherwise
/// lexicographically.
fn level_order(values: &[String]) -> Vec<String> {
    let mut levels: Vec<String> = values.to_vec();
    levels.sort();
    levels.dedup();
    let numeric: Option<Vec<f64>> = levels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(levels).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        return pairs.into_iter().map(|p| p.1).collect();
    }
    levels
}

fn binary(row: usize, column: &str, value: &str) -> Result<bool, IngestError> {
    match value.parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(false),
        Ok(v) if v == 1.0 => Ok(true),
        _ => Err(IngestError::NotBinary { row, column: column.to_string(), value: value.to_string() }),
    }
}

pub fn ingest_reader<R: std::io::Read>(reader: R, roles: &Roles) -> Result<Ingested, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let index = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| IngestError::UnknownColumn(name.to_string()))
    };
    let (ti, si, di) = (index(&roles.time)?, index(&roles.status)?, index(&roles.treatment)?);
    let cov_idx: Vec<usize> = roles.covariates.iter().map(|c| index(c)).collect::<Result<_, _>>()?;
    for c in &roles.categorical {
        if !roles.covariates.contains(c) {
            index(c)?;
        }
    }
    let (mut time, mut event, mut treat) = (Vec::new(), Vec::new(), Vec::new());
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); cov_idx.len()];
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        let field = |i: usize, name: &str| -> Result<String, IngestError> {
            match rec.get(i) {
                Some(v) if !v.is_empty() && v != "NA" => Ok(v.to_string()),
                _ => Err(IngestError::Missing { row, column: name.to_string() }),
            }
        };
        let tv = field(ti, &roles.time)?;
        let t: f64 = tv.parse().map_err(|_| IngestError::NotNumeric {
            row,
            column: roles.time.clone(),
            value: tv.clone(),
        })?;
        if !(t > 0.0 && t.is_finite()) {
            return Err(IngestError::NonPositiveTime { row, value: tv });
        }
        time.push(t);
        event.push(binary(row, &roles.status, &field(si, &roles.status)?)?);
        treat.push(binary(row, &roles.treatment, &field(di, &roles.treatment)?)?);
        for ((c, &i), out) in roles.covariates.iter().zip(&cov_idx).zip(raw.iter_mut()) {
            out.push(field(i, c)?);
        }
    }
    let mut columns = Vec::new();
    let mut levels = BTreeMap::new();
    for (name, values) in roles.covariates.iter().zip(raw) {
        if roles.categorical.contains(name) {
            let order = level_order(&values);
            let codes: Vec<usize> =
                values.iter().map(|v| order.iter().position(|l| l == v).expect("level is listed")).collect();
            levels.insert(name.clone(), order.clone());
            columns.push(Column::categorical(name.clone(), &codes, order));
        } else {
            let nums = values
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| IngestError::NotNumeric {
                        row: k + 1,
                        column: name.clone(),
                        value: v.clone(),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            columns.push(Column::numeric(name.clone(), nums));
        }
    }
    let data = DataSet::new(roles.time.clone(), roles.treatment.clone(), time, event, treat, columns)?;
    Ok(Ingested { data, levels })
}

pub fn ingest(path: &Path, roles: &Roles) -> Result<Ingested, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.to_path_buf(), source })?;
    ingest_reader(std::io::BufReader::new(file), roles)
}

/// Rows whose `column` has the given level label (categorical) or value.
pub fn rows_matching(data: &DataSet, column: &str, level: &str) -> Option<Vec<usize>> {
    let col = data.column(column)?;
    let target = match &col.levels {
        Some(levels) => levels.iter().position(|l| l == level)? as f64,
        None => level.parse::<f64>().ok()?,
    };
    Some((0..data.n()).filter(|&i| col.values[i] == target).collect())
}

/// Write a data set as CSV (categorical columns by label).
pub fn write_csv(path: &Path, data: &DataSet, status_name: &str) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![data.time_name.clone(), status_name.to_string(), data.treatment_name.clone()];
    header.extend(data.columns.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![
            format!("{:?}", data.time[i]),
            u8::from(data.event[i]).to_string(),
            u8::from(data.treatment[i]).to_string(),
        ];
        for c in &data.columns {
            rec.push(match &c.levels {
                Some(_) => c.level_label(c.values[i] as usize),
                None => format!("{:?}", c.values[i]),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
