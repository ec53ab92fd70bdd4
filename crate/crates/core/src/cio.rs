//! Conversions between dense complex arrays and their `[re, im]` JSON form.

use crate::error::{Error, Result};
use crate::{CMatrix, CVector};
use num_complex::Complex64;

pub type Pair = [f64; 2];

pub fn to_pair(z: Complex64) -> Pair {
    [z.re, z.im]
}

pub fn from_pair(p: Pair) -> Complex64 {
    Complex64::new(p[0], p[1])
}

pub fn vector_to_pairs(v: &CVector) -> Vec<Pair> {
    v.iter().copied().map(to_pair).collect()
}

pub fn vector_from_pairs(field: &str, pairs: &[Pair], len: usize) -> Result<CVector> {
    if pairs.len() != len {
        return Err(Error::validation(
            field,
            format!("expected {len} entries, found {}", pairs.len()),
        ));
    }
    check_finite(field, pairs.iter())?;
    Ok(CVector::from_iterator(
        len,
        pairs.iter().copied().map(from_pair),
    ))
}

/// Row-major nested pairs.
pub fn matrix_to_pairs(m: &CMatrix) -> Vec<Vec<Pair>> {
    m.row_iter()
        .map(|row| row.iter().copied().map(to_pair).collect())
        .collect()
}

pub fn matrix_from_pairs(
    field: &str,
    rows: &[Vec<Pair>],
    nrows: usize,
    ncols: usize,
) -> Result<CMatrix> {
    if rows.len() != nrows {
        return Err(Error::validation(
            field,
            format!("expected {nrows} rows, found {}", rows.len()),
        ));
    }
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::validation(
            field,
            format!("row {i} has {} columns, expected {ncols}", row.len()),
        ));
    }
    check_finite(field, rows.iter().flatten())?;
    Ok(CMatrix::from_fn(nrows, ncols, |i, j| from_pair(rows[i][j])))
}

fn check_finite<'a>(field: &str, mut pairs: impl Iterator<Item = &'a Pair>) -> Result<()> {
    if pairs.any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::validation(field, "non-finite entry"));
    }
    Ok(())
}
