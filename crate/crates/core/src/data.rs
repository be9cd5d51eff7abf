//! Multivariate series container and its wide CSV form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarKind {
    Target,
    Local,
    Oci,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
}

impl Variable {
    pub fn new(name: impl Into<String>, kind: VarKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("column {index} has {actual} rows, expected {expected}")]
    RaggedColumns {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("expected exactly one target variable, found {0}")]
    TargetCount(usize),
    #[error("variable count {vars} does not match column count {cols}")]
    Arity { vars: usize, cols: usize },
    #[error("non-finite value in column {column} at row {row}")]
    NonFinite { column: usize, row: usize },
    #[error("csv: {0}")]
    Csv(String),
    #[error("header {found:?} does not match variables {expected:?}")]
    Header {
        expected: Vec<String>,
        found: Vec<String>,
    },
}

/// Aligned multivariate series stored column-wise (one `Vec` per variable).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSeries {
    variables: Vec<Variable>,
    columns: Vec<Vec<f64>>,
}

impl MultiSeries {
    pub fn new(variables: Vec<Variable>, columns: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if variables.len() != columns.len() {
            return Err(DataError::Arity {
                vars: variables.len(),
                cols: columns.len(),
            });
        }
        let expected = columns.first().map_or(0, Vec::len);
        for (index, col) in columns.iter().enumerate() {
            if col.len() != expected {
                return Err(DataError::RaggedColumns {
                    index,
                    expected,
                    actual: col.len(),
                });
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { column: index, row });
            }
        }
        let targets = variables.iter().filter(|v| v.kind == VarKind::Target).count();
        if targets != 1 {
            return Err(DataError::TargetCount(targets));
        }
        Ok(Self { variables, columns })
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn names(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn target_index(&self) -> usize {
        self.variables
            .iter()
            .position(|v| v.kind == VarKind::Target)
            .expect("validated at construction")
    }

    pub fn indices_of(&self, kind: VarKind) -> Vec<usize> {
        self.variables
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Wide CSV: a header of variable names, then one row per time step.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.names().join(","));
        out.push('\n');
        for t in 0..self.len() {
            for (i, col) in self.columns.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{}", col[t]).unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV produced by [`MultiSeries::to_csv`]; kinds come from the sidecar.
    pub fn from_csv(text: &str, variables: Vec<Variable>) -> Result<Self, DataError> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| DataError::Csv("empty file".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let expected: Vec<String> = variables.iter().map(|v| v.name.clone()).collect();
        if header != expected {
            return Err(DataError::Header {
                expected,
                found: header,
            });
        }
        let mut columns = vec![Vec::new(); variables.len()];
        for (row, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(DataError::Csv(format!(
                    "row {} has {} fields, expected {}",
                    row + 1,
                    fields.len(),
                    columns.len()
                )));
            }
            for (col, f) in columns.iter_mut().zip(fields) {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|e| DataError::Csv(format!("row {}: {e}", row + 1)))?;
                col.push(v);
            }
        }
        Self::new(variables, columns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars() -> Vec<Variable> {
        vec![
            Variable::new("fire", VarKind::Target),
            Variable::new("t2m", VarKind::Local),
            Variable::new("nao", VarKind::Oci),
        ]
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let s = MultiSeries::new(
            vars(),
            vec![vec![0.0, 1.0], vec![0.1 + 0.2, -1e-300], vec![std::f64::consts::PI, 2.5]],
        )
        .unwrap();
        let back = MultiSeries::from_csv(&s.to_csv(), vars()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            MultiSeries::new(vars(), vec![vec![0.0], vec![1.0, 2.0], vec![0.0]]),
            Err(DataError::RaggedColumns { index: 1, .. })
        ));
        let two_targets = vec![
            Variable::new("a", VarKind::Target),
            Variable::new("b", VarKind::Target),
        ];
        assert!(matches!(
            MultiSeries::new(two_targets, vec![vec![0.0], vec![0.0]]),
            Err(DataError::TargetCount(2))
        ));
    }
}
