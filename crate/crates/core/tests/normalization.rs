//! Loss-matrix normalization against published normalized cells.

use edgebias::dataset::PlacementPolicy;
use edgebias::harness::{normalize_matrix, LossMatrix, Normalization, CENTRAL_BAND};
use proptest::prelude::*;

fn band(lo: f64, hi: f64) -> PlacementPolicy {
    PlacementPolicy::band(lo, hi)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn central_band_reference_reproduces_published_cells() {
    // Rows: forbidden edge fraction 0.4 and 0 (unrestricted training).
    let cols = vec![CENTRAL_BAND, band(0.9, 1.0)];
    let refs = [3.7e-4, 2.9e-3];
    let published = [25_575.147, 1.041];
    let cells = refs.iter().zip(published).map(|(&r, p)| vec![r, r * p]).collect();
    let raw = LossMatrix::new(
        vec!["allowed:0.6".into(), "unrestricted".into()],
        cols.clone(),
        cells,
        Normalization::Raw,
    )
    .unwrap();
    let n = normalize_matrix(&raw, Normalization::ByCentralBand).unwrap();
    assert_eq!(n.normalization, Normalization::ByCentralBand);
    for (row, &p) in published.iter().enumerate() {
        assert_eq!(n.cells[row][0], 1.0);
        assert!(rel(n.cells[row][1], p) < 1e-12, "{} vs {p}", n.cells[row][1]);
    }
}

#[test]
fn unrestricted_reference_reproduces_published_cell() {
    let cols = vec![PlacementPolicy::Unrestricted, PlacementPolicy::ForbiddenCentral { forbidden: 0.9 }];
    let r = 0.0123;
    let raw = LossMatrix::new(vec!["allowed:0.7".into()], cols, vec![vec![r, r * 4.373]], Normalization::Raw).unwrap();
    let n = normalize_matrix(&raw, Normalization::ByUnrestricted).unwrap();
    assert!(rel(n.cells[0][1], 4.373) < 1e-12);
    assert!(normalize_matrix(&raw, Normalization::ByCentralBand).is_err());
}

proptest! {
    #[test]
    fn normalization_divides_each_row_by_its_reference(
        rows in prop::collection::vec(prop::collection::vec(1e-6f64..10.0, 3), 1..5),
        scale in 1e-3f64..1e3,
    ) {
        let cols = vec![band(0.5, 0.6), CENTRAL_BAND, PlacementPolicy::Unrestricted];
        let labels: Vec<String> = (0..rows.len()).map(|i| format!("r{i}")).collect();
        let raw = LossMatrix::new(labels.clone(), cols.clone(), rows.clone(), Normalization::Raw).unwrap();
        let n = normalize_matrix(&raw, Normalization::ByCentralBand).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let ns = normalize_matrix(&LossMatrix::new(labels, cols, scaled, Normalization::Raw).unwrap(), Normalization::ByCentralBand).unwrap();
        for (i, row) in rows.iter().enumerate() {
            prop_assert_eq!(n.cells[i][1], 1.0);
            for j in 0..3 {
                prop_assert!(rel(n.cells[i][j], row[j] / row[1]) < 1e-15);
                prop_assert!(rel(ns.cells[i][j], n.cells[i][j]) < 1e-12);
            }
        }
    }
}
