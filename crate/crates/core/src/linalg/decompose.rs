use super::{dot, Matrix};
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of `a + jitter·I`.
pub fn cholesky(a: &Matrix, jitter: f64) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape {
            op: "cholesky",
            left: a.shape(),
            right: a.shape(),
        });
    }
    if !(jitter >= 0.0) {
        return Err(Error::contract("jitter must be non-negative"));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)] + jitter;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::Singular {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `(a + jitter·I) X = b` for symmetric positive-definite `a`.
pub fn solve_spd(a: &Matrix, b: &Matrix, jitter: f64) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "solve_spd",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let l = cholesky(a, jitter)?;
    let n = a.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Thin QR factorization by modified Gram-Schmidt with reorthogonalization.
///
/// Returns `(Q, R)` with `Q` of shape `m×n` having orthonormal columns and
/// `R` upper triangular with a strictly positive diagonal, which makes the
/// factorization unique.
pub fn qr_thin(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = a.shape();
    if n > m {
        return Err(Error::contract(format!(
            "thin QR needs rows >= cols, got {m}x{n}"
        )));
    }
    let mut q = Matrix::zeros(m, n);
    let mut r = Matrix::zeros(n, n);
    for j in 0..n {
        let mut v = a.column(j);
        // two passes of MGS keep columns orthogonal to machine precision
        for _ in 0..2 {
            for k in 0..j {
                let qk = q.column(k);
                let proj = dot(&qk, &v);
                r[(k, j)] += proj;
                for (vi, qi) in v.iter_mut().zip(&qk) {
                    *vi -= proj * qi;
                }
            }
        }
        let nv = dot(&v, &v).sqrt();
        if nv <= f64::EPSILON * 16.0 {
            return Err(Error::Singular { pivot: j, value: nv });
        }
        r[(j, j)] = nv;
        for (i, vi) in v.iter().enumerate() {
            q[(i, j)] = vi / nv;
        }
    }
    Ok((q, r))
}
