//! Small dense-matrix helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type CMat = DMatrix<Complex64>;

pub fn c64(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// (M + Mᵀ)/2.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Largest entry of |M − Mᵀ|.
pub fn asymmetry(m: &Mat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Hilbert-Schmidt pairing (D, E) = Tr[Dᵀ E].
pub fn frobenius_inner(d: &Mat, e: &Mat) -> f64 {
    d.iter().zip(e.iter()).map(|(a, b)| a * b).sum()
}

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|x| c64(x, 0.0))
}

/// Real part of `m`, failing if any imaginary part exceeds `tol`.
pub fn real_part_checked(m: &CMat, name: &'static str, tol: f64) -> Result<Mat> {
    let residue = m.iter().fold(0.0_f64, |acc, z| acc.max(z.im.abs()));
    if residue.is_nan() || residue > tol {
        return Err(Error::NonRealCoefficient { name, residue });
    }
    Ok(m.map(|z| z.re))
}

/// (X + X†)/2.
pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()) * c64(0.5, 0.0)
}

pub fn hermitian_deviation(m: &CMat) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Eigenvalues of a Hermitian matrix (only the upper triangle matters),
/// ascending.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let n = m.nrows();
    let mut out: Vec<f64> = match n {
        0 => Vec::new(),
        1 => vec![m[(0, 0)].re],
        2 => {
            let a = m[(0, 0)].re;
            let d = m[(1, 1)].re;
            let b = m[(0, 1)].norm();
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            vec![mean - rad, mean + rad]
        }
        _ => hermitize(m).symmetric_eigenvalues().iter().copied().collect(),
    };
    out.sort_by(|a, b| a.total_cmp(b));
    out
}

pub fn hermitian_min_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Trace norm ‖X‖₁ of a Hermitian matrix.
pub fn trace_norm_hermitian(m: &CMat) -> f64 {
    hermitian_eigenvalues(m).iter().map(|x| x.abs()).sum()
}

pub fn trace(m: &CMat) -> Complex64 {
    m.diagonal().iter().sum()
}

/// Row-major nested arrays into a matrix; `rows`/`cols` give the expected
/// shape when known.
pub fn mat_from_rows(name: &str, rows: &[Vec<f64>], shape: Option<(usize, usize)>) -> Result<Mat> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::InvalidModel(format!("{name}: ragged rows")));
    }
    if let Some((er, ec)) = shape {
        if (er, ec) != (nr, nc) {
            return Err(Error::InvalidModel(format!(
                "{name}: expected {er}x{ec}, got {nr}x{nc}"
            )));
        }
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidModel(format!("{name}: non-finite entry")));
    }
    Ok(Mat::from_fn(nr, nc, |i, j| rows[i][j]))
}

pub fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn check_shape(context: &'static str, m: &Mat, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::dims(
            context,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

/// Solves AX + XAᵀ + Q = 0 through the Kronecker form (small m only).
pub fn solve_lyapunov(a: &Mat, q: &Mat) -> Option<Mat> {
    let m = a.nrows();
    let eye = Mat::identity(m, m);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = Vector::from_iterator(m * m, q.iter().map(|x| -x));
    let sol = op.lu().solve(&rhs)?;
    Some(symmetrize(&Mat::from_column_slice(m, m, sol.as_slice())))
}
