//! Per-subject records: follow-up time, event status, treatment and covariates.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("column {column} has {found} rows, expected {expected}")]
    Length { column: String, expected: usize, found: usize },
    #[error("row {row}: follow-up time {value} must be finite and positive")]
    NonPositiveTime { row: usize, value: f64 },
    #[error("row {row}: column {column} is not finite")]
    NonFinite { column: String, row: usize },
    #[error("duplicate column name {0}")]
    DuplicateColumn(String),
    #[error("data set is empty")]
    Empty,
}

/// A covariate column. Categorical columns store level codes `0..levels.len()`
/// as `f64` and keep the level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
    pub levels: Option<Vec<String>>,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values, levels: None }
    }

    pub fn categorical(name: impl Into<String>, codes: &[usize], levels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            values: codes.iter().map(|&c| c as f64).collect(),
            levels: Some(levels),
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.levels.is_some()
    }

    pub fn codes(&self) -> Vec<usize> {
        self.values.iter().map(|&v| v as usize).collect()
    }

    /// Label of a level code, or the code itself for numeric columns.
    pub fn level_label(&self, code: usize) -> String {
        match &self.levels {
            Some(levels) => levels.get(code).cloned().unwrap_or_else(|| format!("{code}")),
            None => format!("{code}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub time_name: String,
    pub treatment_name: String,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub treatment: Vec<bool>,
    pub columns: Vec<Column>,
}

impl DataSet {
    pub fn new(
        time_name: impl Into<String>,
        treatment_name: impl Into<String>,
        time: Vec<f64>,
        event: Vec<bool>,
        treatment: Vec<bool>,
        columns: Vec<Column>,
    ) -> Result<Self, DataError> {
        let n = time.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        for (name, len) in [("status", event.len()), ("treatment", treatment.len())] {
            if len != n {
                return Err(DataError::Length { column: String::from(name), expected: n, found: len });
            }
        }
        for (row, &t) in time.iter().enumerate() {
            if !(t.is_finite() && t > 0.0) {
                return Err(DataError::NonPositiveTime { row, value: t });
            }
        }
        for (k, c) in columns.iter().enumerate() {
            if c.values.len() != n {
                return Err(DataError::Length { column: c.name.clone(), expected: n, found: c.values.len() });
            }
            if let Some(row) = c.values.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { column: c.name.clone(), row });
            }
            if columns[..k].iter().any(|o| o.name == c.name) {
                return Err(DataError::DuplicateColumn(c.name.clone()));
            }
        }
        Ok(Self {
            time_name: time_name.into(),
            treatment_name: treatment_name.into(),
            time,
            event,
            treatment,
            columns,
        })
    }

    pub fn n(&self) -> usize {
        self.time.len()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// A new data set made of the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick_f = |v: &[f64]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let pick_b = |v: &[bool]| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        Self {
            time_name: self.time_name.clone(),
            treatment_name: self.treatment_name.clone(),
            time: pick_f(&self.time),
            event: pick_b(&self.event),
            treatment: pick_b(&self.treatment),
            columns: self
                .columns
                .iter()
                .map(|c| Column { name: c.name.clone(), values: pick_f(&c.values), levels: c.levels.clone() })
                .collect(),
        }
    }

    /// Same data with the treatment indicator flipped for every subject.
    pub fn with_swapped_treatment(&self) -> Self {
        let mut out = self.clone();
        out.treatment.iter_mut().for_each(|d| *d = !*d);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_bad_times_and_lengths() {
        let err = DataSet::new("t", "d", vec![1.0, 0.0], vec![true, false], vec![false, true], vec![]);
        assert_eq!(err, Err(DataError::NonPositiveTime { row: 1, value: 0.0 }));
        let err = DataSet::new("t", "d", vec![1.0, 2.0], vec![true], vec![false, true], vec![]);
        assert!(matches!(err, Err(DataError::Length { .. })));
        let cols = vec![Column::numeric("x", vec![1.0, f64::NAN])];
        let err = DataSet::new("t", "d", vec![1.0, 2.0], vec![true, false], vec![false, true], cols);
        assert_eq!(err, Err(DataError::NonFinite { column: String::from("x"), row: 1 }));
    }

    #[test]
    fn row_selection_keeps_alignment() {
        let cols = vec![Column::numeric("x", vec![10.0, 20.0, 30.0])];
        let d = DataSet::new("t", "d", vec![1.0, 2.0, 3.0], vec![true, false, true], vec![false, true, true], cols)
            .unwrap();
        let s = d.select_rows(&[2, 0]);
        assert_eq!(s.time, vec![3.0, 1.0]);
        assert_eq!(s.column("x").unwrap().values, vec![30.0, 10.0]);
        assert_eq!(s.treatment, vec![true, false]);
    }
}
