//! Training-by-evaluation loss matrices, their normalizations and CSV form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::PlacementPolicy;
use crate::{Error, Result};

/// Header cell above the row labels in matrix CSV files.
pub const CORNER: &str = "train\\eval";

/// The most central evaluation band, reference of [`Normalization::ByCentralBand`].
pub const CENTRAL_BAND: PlacementPolicy = PlacementPolicy::Band { lo: 0.0, hi: 0.1 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    /// Each row divided by its `band:0.0-0.1` cell.
    ByCentralBand,
    /// Each row divided by its `unrestricted` cell.
    ByUnrestricted,
}

impl Normalization {
    pub fn reference(self) -> Option<PlacementPolicy> {
        match self {
            Normalization::Raw => None,
            Normalization::ByCentralBand => Some(CENTRAL_BAND),
            Normalization::ByUnrestricted => Some(PlacementPolicy::Unrestricted),
        }
    }
}

/// Rows are training restrictions, columns evaluation policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<PlacementPolicy>,
    pub cells: Vec<Vec<f64>>,
    pub normalization: Normalization,
}

impl LossMatrix {
    pub fn new(
        rows: Vec<String>,
        cols: Vec<PlacementPolicy>,
        cells: Vec<Vec<f64>>,
        normalization: Normalization,
    ) -> Result<LossMatrix> {
        if cells.len() != rows.len() || cells.iter().any(|r| r.len() != cols.len()) {
            return Err(Error::shape(format!(
                "matrix cells do not match {} rows x {} columns",
                rows.len(),
                cols.len()
            )));
        }
        if let Some(bad) = rows.iter().find(|r| r.contains(',') || r.contains('\n')) {
            return Err(Error::invalid(format!("row label {bad:?} contains a separator")));
        }
        Ok(LossMatrix {
            rows,
            cols,
            cells,
            normalization,
        })
    }

    /// First column whose policy equals `policy`.
    pub fn column(&self, policy: &PlacementPolicy) -> Option<usize> {
        self.cols.iter().position(|c| c == policy)
    }

    pub fn cell(&self, row: usize, policy: &PlacementPolicy) -> Option<f64> {
        Some(self.cells.get(row)?[self.column(policy)?])
    }

    /// Concatenates the rows of matrices that share columns and normalization.
    pub fn stack(parts: &[LossMatrix]) -> Result<LossMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("no matrices to stack"))?;
        let mut out = LossMatrix {
            rows: Vec::new(),
            cols: first.cols.clone(),
            cells: Vec::new(),
            normalization: first.normalization,
        };
        for m in parts {
            if m.cols != out.cols || m.normalization != out.normalization {
                return Err(Error::invalid("stacked matrices differ in columns or normalization"));
            }
            out.rows.extend(m.rows.iter().cloned());
            out.cells.extend(m.cells.iter().cloned());
        }
        Ok(out)
    }

    /// Header row of evaluation labels, then one line per training row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CORNER);
        for c in &self.cols {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for (label, row) in self.rows.iter().zip(&self.cells) {
            s.push_str(label);
            for v in row {
                write!(s, ",{v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, normalization: Normalization) -> Result<LossMatrix> {
        let bad = |r: String| Error::format("matrix csv", r);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut fields = header.split(',');
        if fields.next() != Some(CORNER) {
            return Err(bad(format!("header must start with {CORNER:?}")));
        }
        let cols = fields.map(str::parse).collect::<Result<Vec<PlacementPolicy>>>()?;
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut fields = line.split(',');
            rows.push(fields.next().unwrap_or_default().to_string());
            let row = fields
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", i + 1)))?;
            if row.len() != cols.len() {
                return Err(bad(format!("row {} has {} cells, expected {}", i + 1, row.len(), cols.len())));
            }
            cells.push(row);
        }
        LossMatrix::new(rows, cols, cells, normalization)
    }
}

/// Divides every row of a raw matrix by its reference cell.
pub fn normalize_matrix(matrix: &LossMatrix, mode: Normalization) -> Result<LossMatrix> {
    if matrix.normalization != Normalization::Raw {
        return Err(Error::invalid("only raw matrices can be normalized"));
    }
    let Some(reference) = mode.reference() else {
        return Ok(matrix.clone());
    };
    let j = matrix
        .column(&reference)
        .ok_or_else(|| Error::MissingReference(reference.to_string()))?;
    let cells = matrix
        .cells
        .iter()
        .map(|row| row.iter().map(|v| v / row[j]).collect())
        .collect();
    Ok(LossMatrix {
        cells,
        normalization: mode,
        ..matrix.clone()
    })
}

/// Cell-wise arithmetic mean of matrices with identical rows and columns.
pub fn mean_matrix(parts: &[LossMatrix]) -> Result<LossMatrix> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("no matrices to average"))?;
    if parts
        .iter()
        .any(|m| m.rows != first.rows || m.cols != first.cols || m.normalization != first.normalization)
    {
        return Err(Error::invalid("averaged matrices differ in layout"));
    }
    let k = parts.len() as f64;
    let cells = (0..first.rows.len())
        .map(|i| {
            (0..first.cols.len())
                .map(|j| parts.iter().map(|m| m.cells[i][j]).sum::<f64>() / k)
                .collect()
        })
        .collect();
    Ok(LossMatrix {
        cells,
        ..first.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(cells: Vec<Vec<f64>>) -> LossMatrix {
        let cols = vec![CENTRAL_BAND, PlacementPolicy::band(0.9, 1.0), PlacementPolicy::Unrestricted];
        let rows = (0..cells.len()).map(|i| format!("allowed:0.{}", i + 1)).collect();
        LossMatrix::new(rows, cols, cells, Normalization::Raw).unwrap()
    }

    #[test]
    fn reference_column_becomes_one() {
        let m = matrix(vec![vec![0.5, 2.0, 1.0], vec![0.25, 8.0, 4.0]]);
        let n = normalize_matrix(&m, Normalization::ByCentralBand).unwrap();
        assert_eq!(n.cells, [[1.0, 4.0, 2.0], [1.0, 32.0, 16.0]]);
        let u = normalize_matrix(&m, Normalization::ByUnrestricted).unwrap();
        assert_eq!(u.cells[1], [0.0625, 2.0, 1.0]);
    }

    #[test]
    fn missing_reference_is_an_error() {
        let m = LossMatrix::new(
            vec!["x".into()],
            vec![PlacementPolicy::band(0.9, 1.0)],
            vec![vec![1.0]],
            Normalization::Raw,
        )
        .unwrap();
        assert!(matches!(
            normalize_matrix(&m, Normalization::ByCentralBand),
            Err(Error::MissingReference(_))
        ));
        assert!(matches!(
            normalize_matrix(&m, Normalization::ByUnrestricted),
            Err(Error::MissingReference(_))
        ));
    }

    #[test]
    fn normalizing_twice_is_rejected() {
        let m = matrix(vec![vec![1.0, 2.0, 3.0]]);
        let n = normalize_matrix(&m, Normalization::ByCentralBand).unwrap();
        assert!(normalize_matrix(&n, Normalization::ByUnrestricted).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = matrix(vec![vec![0.1, 1.0 / 3.0, 6.974354], vec![4.1e-4, 2.0f64.sqrt(), 1e-300]]);
        let text = m.to_csv();
        assert!(text.starts_with("train\\eval,band:0.0-0.1,band:0.9-1.0,unrestricted\n"));
        assert_eq!(LossMatrix::from_csv(&text, Normalization::Raw).unwrap(), m);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let text = "train\\eval,unrestricted\nx,1.0,2.0\n";
        assert!(LossMatrix::from_csv(text, Normalization::Raw).is_err());
        assert!(LossMatrix::from_csv("a,b\n", Normalization::Raw).is_err());
    }

    #[test]
    fn stack_and_mean() {
        let a = matrix(vec![vec![1.0, 2.0, 3.0]]);
        let b = matrix(vec![vec![3.0, 4.0, 5.0]]);
        assert_eq!(mean_matrix(&[a.clone(), b.clone()]).unwrap().cells, [[2.0, 3.0, 4.0]]);
        let s = LossMatrix::stack(&[a, b]).unwrap();
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.cell(1, &PlacementPolicy::Unrestricted), Some(5.0));
    }

    #[test]
    fn labels_with_commas_are_rejected() {
        assert!(LossMatrix::new(vec!["a,b".into()], vec![], vec![vec![]], Normalization::Raw).is_err());
    }
}
