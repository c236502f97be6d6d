//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{LqError, Result};

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Induced 2-norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

pub fn max_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Solves `a x = b` for symmetric positive-definite `a` by Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| LqError::Solve(format!("{what}: matrix not positive definite")))?;
    let x = chol.solve(b);
    if !all_finite(&x) {
        return Err(LqError::NonFinite(what.to_string()));
    }
    Ok(x)
}

/// Checks symmetry within `rel_tol` relative to the largest entry.
pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() <= rel_tol * scale
}

/// Row-major flattening, the layout used by every config and CSV file.
pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(LqError::Dimension(format!(
            "expected {} entries for a {rows}x{cols} matrix, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * m * x)[(0, 0)]
}

/// Uniform grid `0 = t_0 < ... < t_g = horizon` with the last node pinned to `horizon`.
pub fn uniform_grid(horizon: f64, intervals: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=intervals)
        .map(|i| horizon * i as f64 / intervals as f64)
        .collect();
    if let Some(last) = grid.last_mut() {
        *last = horizon;
    }
    grid
}

/// Composite trapezoid rule for samples on an arbitrary grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-3.0, 2.0]));
        assert!((spectral_norm(&m) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_solve(&a, &DMatrix::identity(2, 2), "test").is_err());
    }

    #[test]
    fn row_major_round_trip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(row_major(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(from_row_major(2, 3, &row_major(&m)).unwrap(), m);
    }

    #[test]
    fn trapezoid_is_exact_for_linear() {
        let g = uniform_grid(2.0, 7);
        let v: Vec<f64> = g.iter().map(|t| 3.0 * t + 1.0).collect();
        assert!((trapezoid(&g, &v) - 8.0).abs() < 1e-13);
    }
}
