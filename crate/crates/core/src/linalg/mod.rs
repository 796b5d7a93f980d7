//! Dense matrix arithmetic, factorizations, binary I/O and
//! finite-difference gradient oracles.

mod decompose;
pub mod io;
mod matrix;

pub use decompose::{cholesky, qr_thin, solve_spd};
pub use matrix::{cosine, dot, matmul, matmul_nt, matmul_tn, norm, Matrix};

use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function of a matrix.
///
/// Entry `(r, c)` is `(f(x + h·e_rc) − f(x − h·e_rc)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = probe[(r, c)];
            probe[(r, c)] = orig + h;
            let fp = f(&probe)?;
            probe[(r, c)] = orig - h;
            let fm = f(&probe)?;
            probe[(r, c)] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
            grad[(r, c)] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Entry-wise relative error `|a − b| / max(|a|, |b|, floor)`, maximized.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    /// Gauss-Jordan inverse with partial pivoting; independent of Cholesky.
    fn explicit_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = Matrix::zeros(n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                aug[(i, j)] = a[(i, j)];
            }
            aug[(i, n + i)] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| aug[(x, col)].abs().total_cmp(&aug[(y, col)].abs()))
                .unwrap();
            for j in 0..2 * n {
                let t = aug[(col, j)];
                aug[(col, j)] = aug[(piv, j)];
                aug[(piv, j)] = t;
            }
            let p = aug[(col, col)];
            for j in 0..2 * n {
                aug[(col, j)] /= p;
            }
            for i in 0..n {
                if i != col {
                    let f = aug[(i, col)];
                    for j in 0..2 * n {
                        aug[(i, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
        Matrix::from_fn(n, n, |i, j| aug[(i, n + j)])
    }

    fn random_spd(rng: &mut RngStream, n: usize) -> Matrix {
        let g = rng.gaussian_matrix(n, n, 0.0, 1.0);
        let mut a = matmul_tn(&g, &g).unwrap();
        for i in 0..n {
            a[(i, i)] += n as f64;
        }
        a
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]])
            .unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let p = matmul(&a, &b).unwrap();
        assert_eq!(p.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(7);
        let a = rng.gaussian_matrix(7, 5, 0.0, 1.0);
        let b = rng.gaussian_matrix(5, 3, 0.0, 1.0);
        let diff = matmul(&a, &b).unwrap().sub(&naive(&a, &b)).unwrap();
        assert!(diff.max_abs() <= 1e-12);
        let tn = matmul_tn(&a.transpose(), &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose()).unwrap();
        assert!(tn.sub(&naive(&a, &b)).unwrap().max_abs() <= 1e-12);
        assert!(nt.sub(&naive(&a, &b)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn checked_construction_rejects_nan() {
        assert!(Matrix::from_vec_checked(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec_checked(1, 2, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn solve_spd_examples() {
        let b = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(solve_spd(&Matrix::identity(2), &b, 0.0).unwrap(), b);

        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![2.0], vec![8.0]]).unwrap();
        let x = solve_spd(&a, &b, 0.0).unwrap();
        assert!((x[(0, 0)] - 1.0).abs() < 1e-15 && (x[(1, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn solve_spd_matches_explicit_inverse() {
        let mut rng = RngStream::new(11);
        let a = random_spd(&mut rng, 6);
        let b = rng.gaussian_matrix(6, 2, 0.0, 1.0);
        let x = solve_spd(&a, &b, 0.0).unwrap();
        let oracle = matmul(&explicit_inverse(&a), &b).unwrap();
        let rel = x.sub(&oracle).unwrap().frobenius_norm() / oracle.frobenius_norm();
        assert!(rel <= 1e-9, "relative error {rel}");
    }

    #[test]
    fn solve_spd_reports_pivot() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Matrix::zeros(2, 1);
        match solve_spd(&a, &b, 0.0) {
            Err(Error::Singular { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
        assert!(solve_spd(&a, &b, 1e-6).is_ok());
    }

    #[test]
    fn qr_is_orthonormal_with_positive_diagonal() {
        let mut rng = RngStream::new(3);
        let a = rng.gaussian_matrix(9, 4, 0.0, 1.0);
        let (q, r) = qr_thin(&a).unwrap();
        let qtq = matmul_tn(&q, &q).unwrap();
        assert!(qtq.sub(&Matrix::identity(4)).unwrap().max_abs() < 1e-13);
        assert!(matmul(&q, &r).unwrap().sub(&a).unwrap().max_abs() < 1e-12);
        for i in 0..4 {
            assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn finite_diff_linear_and_quadratic() {
        let mut rng = RngStream::new(5);
        let x = rng.gaussian_matrix(3, 4, 0.0, 1.0);
        let g = finite_diff_grad(|m| Ok(m.sum()), &x, 1e-5).unwrap();
        assert!(g.sub(&Matrix::filled(3, 4, 1.0)).unwrap().max_abs() < 1e-9);
        let g = finite_diff_grad(|m| Ok(0.5 * m.frobenius_norm().powi(2)), &x, 1e-4).unwrap();
        assert!(g.sub(&x).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn finite_diff_matches_softmax_gradient() {
        let logits = Matrix::from_rows(&[vec![0.3, -1.2, 2.0], vec![1.0, 0.5, -0.5]]).unwrap();
        let labels = [2usize, 0];
        let ce = |z: &Matrix| -> Result<f64> {
            let mut total = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let row = z.row(r);
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Ok(total / labels.len() as f64)
        };
        let fd = finite_diff_grad(ce, &logits, 1e-5).unwrap();
        // analytic: (softmax − onehot) / N at entry (0,0)
        let row = logits.row(0);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        let analytic = (row[0].exp() / z) / 2.0;
        assert!((fd[(0, 0)] - analytic).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_propagates_non_finite() {
        let x = Matrix::zeros(1, 1);
        let r = finite_diff_grad(|m| Ok(1.0 / m[(0, 0)].abs().min(0.0)), &x, 1e-3);
        assert!(r.is_err());
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let mut rng = RngStream::new(1);
        let a = rng.gaussian_matrix(3, 2, 0.0, 1.0);
        let b = Matrix::zeros(0, 4);
        let bytes = io::encode_matrices(&[&a, &b]);
        assert_eq!(&bytes[..4], b"LTMX");
        let back = io::decode_matrices(&bytes).unwrap();
        assert_eq!(back, vec![a, b]);
        let err = io::decode_matrices(&bytes[..20]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 20, .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(io::decode_matrices(&bad), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in 0u64..1000, m in 1usize..6, n in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = RngStream::new(seed);
            let a = rng.gaussian_matrix(m, n, 0.0, 1.0);
            let b = rng.gaussian_matrix(n, p, 0.0, 1.0);
            let c = rng.gaussian_matrix(p, q, 0.0, 1.0);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let rel = left.sub(&right).unwrap().frobenius_norm() / left.frobenius_norm().max(1e-300);
            prop_assert!(rel <= 1e-9);
        }

        #[test]
        fn solve_spd_recovers_solution(seed in 0u64..1000, n in 1usize..8) {
            let mut rng = RngStream::new(seed);
            let a = random_spd(&mut rng, n);
            let x0 = rng.gaussian_matrix(n, 2, 0.0, 1.0);
            let b = matmul(&a, &x0).unwrap();
            let x = solve_spd(&a, &b, 0.0).unwrap();
            let rel = x.sub(&x0).unwrap().frobenius_norm() / x0.frobenius_norm();
            prop_assert!(rel <= 1e-9);
        }
    }
}
