//! Small dense linear-algebra helpers shared by the sampler and the samplers
//! of individual distributions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative diagonal jitter applied once when a Cholesky factorization fails.
pub const JITTER: f64 = 1e-8;

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factorization with a single diagonal-jitter retry.
pub fn cholesky(m: &DMatrix<f64>, context: &str) -> Result<Chol> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let mut jittered = m.clone();
    for i in 0..m.nrows() {
        let d = m[(i, i)];
        jittered[(i, i)] += if d > 0.0 { JITTER * d } else { JITTER };
    }
    Cholesky::new(jittered).ok_or_else(|| Error::numerical(format!("{context}: Cholesky failed")))
}

pub fn log_det(chol: &Chol) -> f64 {
    chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
}

pub fn is_spd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (m[(i, j)], m[(j, i)]);
            if (a - b).abs() > 1e-10 * (1.0 + a.abs().max(b.abs())) {
                return false;
            }
        }
    }
    n == 0 || Cholesky::new(m.clone()).is_some()
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Principal submatrix on the given (sorted) indices.
pub fn principal(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Inverse of an SPD matrix through its Cholesky factor. Only used where an
/// explicit small (r x r) inverse is part of a formula.
pub fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = cholesky(m, context)?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::validation("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Serde adapter storing a `DMatrix` as a list of rows.
pub mod rows_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        super::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(Cholesky::new(m.clone()).is_none());
        assert!(cholesky(&m, "test").is_ok());
    }

    #[test]
    fn indefinite_matrix_fails_after_jitter() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(cholesky(&m, "neg"), Err(Error::Numerical { .. })));
    }

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = cholesky(&m, "t").unwrap();
        assert!((log_det(&c) - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn principal_picks_rows_and_columns() {
        let m = DMatrix::from_fn(4, 4, |i, j| (10 * i + j) as f64);
        let s = principal(&m, &[1, 3]);
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[11.0, 13.0, 31.0, 33.0]));
    }
}
