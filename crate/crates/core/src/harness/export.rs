//! Result files of a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{LossMatrix, Normalization, RunRecord};
use crate::dataset::PlacementPolicy;
use crate::{Error, Result};

pub const RESULTS_JSON: &str = "results.json";
pub const MATRIX_RAW_CSV: &str = "matrix_raw.csv";
pub const MATRIX_NORM_CSV: &str = "matrix_norm.csv";
pub const CURVES_CSV: &str = "curves.csv";

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loss against band for every band column, one line per (row, band).
fn curves_csv(raw: &LossMatrix, by_center: Option<&LossMatrix>) -> String {
    let mut s = String::from("train,eval,lo,hi,loss,normalized\n");
    for (i, row) in raw.rows.iter().enumerate() {
        for (j, col) in raw.cols.iter().enumerate() {
            if let PlacementPolicy::Band { lo, hi } = col {
                let norm = by_center.map(|m| format!("{:?}", m.cells[i][j])).unwrap_or_default();
                writeln!(s, "{row},{col},{lo:?},{hi:?},{:?},{norm}", raw.cells[i][j]).unwrap();
            }
        }
    }
    s
}

/// Writes `results.json`, `matrix_raw.csv`, `matrix_norm.csv` (by the
/// central band when present, else by the unrestricted column) and
/// `curves.csv` into `dir`. Returns the written paths.
pub fn export_results(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = serde_json::to_vec_pretty(record)?;
    json.push(b'\n');
    let mut written = vec![
        write(dir.join(RESULTS_JSON), &json)?,
        write(dir.join(MATRIX_RAW_CSV), record.matrix.to_csv().as_bytes())?,
    ];
    let norm = record
        .normalized(Normalization::ByCentralBand)
        .or_else(|| record.normalized(Normalization::ByUnrestricted));
    match norm {
        Some(m) => written.push(write(dir.join(MATRIX_NORM_CSV), m.to_csv().as_bytes())?),
        None => log::warn!("no reference column; {MATRIX_NORM_CSV} not written"),
    }
    let curves = curves_csv(&record.matrix, record.normalized(Normalization::ByCentralBand));
    written.push(write(dir.join(CURVES_CSV), curves.as_bytes())?);
    Ok(written)
}

/// Reads a `results.json` file, or the one inside a directory.
pub fn read_results(path: &Path) -> Result<RunRecord> {
    let file = if path.is_dir() {
        path.join(RESULTS_JSON)
    } else {
        path.to_path_buf()
    };
    let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
