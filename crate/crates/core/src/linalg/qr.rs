//! Householder QR with a positive-diagonal convention, and its pullback.

use super::DenseMatrix;
use crate::error::LinalgError;

/// A column whose residual norm falls below this fraction of the largest
/// input column norm is treated as linearly dependent.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Diagonal entries of `R` below this are considered singular in the pullback.
const SINGULAR_DIAGONAL: f64 = 1e-300;

/// Thin QR factors: `q` is `n x k` with orthonormal columns, `r` is `k x k`
/// upper triangular with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct QrFactors {
    pub q: DenseMatrix,
    pub r: DenseMatrix,
}

/// Adjoints `∂L/∂Q` and `∂L/∂R` of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct QrAdjoints {
    pub q_bar: DenseMatrix,
    pub r_bar: DenseMatrix,
}

impl QrAdjoints {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            q_bar: DenseMatrix::zeros(n, k),
            r_bar: DenseMatrix::zeros(k, k),
        }
    }
}

impl QrFactors {
    pub fn log_diag(&self) -> Vec<f64> {
        self.r.diag().into_iter().map(f64::ln).collect()
    }
}

/// Thin QR of an `n x k` matrix (`n >= k`) via Householder reflections,
/// followed by a sign fix so that every `R[i][i] > 0`. Under that
/// convention the factorization of a full-rank matrix is unique.
pub fn qr_positive(a: &DenseMatrix) -> Result<QrFactors, LinalgError> {
    let (n, k) = a.shape();
    if n < k {
        return Err(LinalgError::WideMatrix { rows: n, cols: k });
    }
    a.check_finite("qr")?;

    // Column-major working copy: row j of `w` is column j of `a`.
    let mut w = a.transpose();
    let reference = (0..k).map(|j| super::norm2(w.row(j))).fold(0.0_f64, f64::max);
    if k > 0 && !(reference > 0.0) {
        return Err(LinalgError::RankDeficient {
            column: 0,
            norm: 0.0,
            reference,
        });
    }

    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let col = &w.row(j)[j..];
        let norm = super::norm2(col);
        if norm <= RANK_TOLERANCE * reference {
            return Err(LinalgError::RankDeficient {
                column: j,
                norm,
                reference,
            });
        }
        let alpha = if col[0] >= 0.0 { -norm } else { norm };
        let mut v = col.to_vec();
        v[0] -= alpha;
        let vnorm = super::norm2(&v);
        if vnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= vnorm);
        }
        // Apply H = I - 2 v vᵀ to the trailing columns j..k.
        for c in j..k {
            let tail = &mut w.row_mut(c)[j..];
            let s = 2.0 * super::dot(&v, tail);
            for (t, vi) in tail.iter_mut().zip(&v) {
                *t -= s * vi;
            }
        }
        reflectors.push(v);
    }

    let mut r = DenseMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            r[(i, j)] = w[(j, i)];
        }
    }

    // Q = H_0 H_1 ... H_{k-1} [I; 0], accumulated column-major.
    let mut qt = DenseMatrix::eye(k, n);
    for (j, v) in reflectors.iter().enumerate().rev() {
        for c in 0..k {
            let tail = &mut qt.row_mut(c)[j..];
            let s = 2.0 * super::dot(v, tail);
            for (t, vi) in tail.iter_mut().zip(v) {
                *t -= s * vi;
            }
        }
    }

    for i in 0..k {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).iter_mut().for_each(|x| *x = -*x);
            qt.row_mut(i).iter_mut().for_each(|x| *x = -*x);
        }
    }

    Ok(QrFactors { q: qt.transpose(), r })
}

/// Symmetric matrix built from the lower triangle:
/// `out[i][j] = m[max(i, j)][min(i, j)]`.
pub fn copyltu(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            op: "copyltu",
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    let n = m.rows();
    Ok(DenseMatrix::from_fn(n, n, |i, j| m[(i.max(j), i.min(j))]))
}

/// Reverse-mode rule for `A = QR`: given `Q̄` and `R̄`, returns `Ā`.
///
/// `Ā = [Q̄ + Q copyltu(M)] R⁻ᵀ` with `M = R R̄ᵀ − Q̄ᵀ Q`. The right
/// division by `Rᵀ` is a row-wise back substitution.
pub fn qr_pullback(f: &QrFactors, adj: &QrAdjoints) -> Result<DenseMatrix, LinalgError> {
    let (n, k) = f.q.shape();
    if adj.q_bar.shape() != (n, k) {
        return Err(LinalgError::DimensionMismatch {
            op: "qr_pullback",
            left: (n, k),
            right: adj.q_bar.shape(),
        });
    }
    if f.r.shape() != (k, k) || adj.r_bar.shape() != (k, k) {
        return Err(LinalgError::DimensionMismatch {
            op: "qr_pullback",
            left: f.r.shape(),
            right: adj.r_bar.shape(),
        });
    }
    for i in 0..k {
        let d = f.r[(i, i)];
        if !(d.abs() >= SINGULAR_DIAGONAL) {
            return Err(LinalgError::SingularTriangular { index: i, value: d });
        }
    }

    let mut m = f.r.matmul_t(&adj.r_bar)?;
    let qbar_t_q = adj.q_bar.t_matmul(&f.q)?;
    m.axpy(-1.0, &qbar_t_q)?;
    let sym = copyltu(&m)?;
    let mut b = f.q.matmul(&sym)?;
    b.axpy(1.0, &adj.q_bar)?;
    solve_right_upper_transpose(&f.r, &mut b);
    Ok(b)
}

/// Overwrites `b` with `X` solving `X Rᵀ = B`; each row is `R xᵀ = bᵀ`.
fn solve_right_upper_transpose(r: &DenseMatrix, b: &mut DenseMatrix) {
    let k = r.rows();
    for row in 0..b.rows() {
        let x = b.row_mut(row);
        for i in (0..k).rev() {
            let mut s = x[i];
            let ri = r.row(i);
            for j in i + 1..k {
                s -= ri[j] * x[j];
            }
            x[i] = s / ri[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn orthonormality_error(q: &DenseMatrix) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.max_abs_diff(&DenseMatrix::identity(q.cols()))
    }

    #[test]
    fn identity_factors_trivially() {
        let f = qr_positive(&DenseMatrix::identity(3)).unwrap();
        assert!(f.q.max_abs_diff(&DenseMatrix::identity(3)) < 1e-15);
        assert!(f.r.max_abs_diff(&DenseMatrix::identity(3)) < 1e-15);
    }

    #[test]
    fn rotation_gets_positive_diagonal() {
        let a = DenseMatrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        let f = qr_positive(&a).unwrap();
        assert!(f.r[(0, 0)] > 0.0 && f.r[(1, 1)] > 0.0);
        let qr = f.q.matmul(&f.r).unwrap();
        assert!(qr.max_abs_diff(&a) < 1e-15);
        // The rotation is itself orthogonal, so R = I and Q = a.
        assert!(f.q.max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn random_tall_matrix_reconstructs() {
        let a = gaussian(20, 5, 11);
        let f = qr_positive(&a).unwrap();
        assert!(orthonormality_error(&f.q) < 1e-10);
        let rel = f.q.matmul(&f.r).unwrap().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
        assert!(rel < 1e-10);
        for i in 0..5 {
            assert!(f.r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(f.r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn dependent_columns_are_rejected() {
        let a = DenseMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        assert!(matches!(qr_positive(&a), Err(LinalgError::RankDeficient { column: 1, .. })));
        assert!(matches!(
            qr_positive(&DenseMatrix::zeros(3, 2)),
            Err(LinalgError::RankDeficient { .. })
        ));
    }

    #[test]
    fn wide_and_nonfinite_inputs_are_rejected() {
        assert!(qr_positive(&DenseMatrix::zeros(2, 3)).is_err());
        let mut a = DenseMatrix::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(qr_positive(&a), Err(LinalgError::NonFinite { .. })));
    }

    #[test]
    fn copyltu_examples() {
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(copyltu(&m).unwrap(), DenseMatrix::from_rows(&[&[1.0, 3.0], &[3.0, 4.0]]));
        let s = DenseMatrix::from_rows(&[&[2.0, -1.0], &[-1.0, 5.0]]);
        assert_eq!(copyltu(&s).unwrap(), s);
        let one = DenseMatrix::from_rows(&[&[5.0]]);
        assert_eq!(copyltu(&one).unwrap(), one);
        assert!(copyltu(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn pullback_of_zero_adjoint_is_zero() {
        let f = qr_positive(&gaussian(6, 3, 2)).unwrap();
        let abar = qr_pullback(&f, &QrAdjoints::zeros(6, 3)).unwrap();
        assert_eq!(abar, DenseMatrix::zeros(6, 3));
    }

    #[test]
    fn pullback_of_r11_at_identity() {
        let f = qr_positive(&DenseMatrix::identity(3)).unwrap();
        let mut adj = QrAdjoints::zeros(3, 3);
        adj.r_bar[(0, 0)] = 1.0;
        let abar = qr_pullback(&f, &adj).unwrap();
        let mut expect = DenseMatrix::zeros(3, 3);
        expect[(0, 0)] = 1.0;
        assert!(abar.max_abs_diff(&expect) < 1e-15);
        // Perturbing a11 by eps moves R11 by eps.
        let eps = 1e-7;
        let mut a = DenseMatrix::identity(3);
        a[(0, 0)] += eps;
        let fp = qr_positive(&a).unwrap();
        assert!(((fp.r[(0, 0)] - 1.0) / eps - 1.0).abs() < 1e-8);
    }

    #[test]
    fn pullback_of_log_diagonal_matches_finite_differences() {
        let a = gaussian(10, 4, 7);
        let loss = |m: &DenseMatrix| qr_positive(m).unwrap().log_diag().iter().sum::<f64>();
        let f = qr_positive(&a).unwrap();
        let mut adj = QrAdjoints::zeros(10, 4);
        for i in 0..4 {
            adj.r_bar[(i, i)] = 1.0 / f.r[(i, i)];
        }
        let abar = qr_pullback(&f, &adj).unwrap();
        let h = 1e-6;
        let mut fd = DenseMatrix::zeros(10, 4);
        for i in 0..10 {
            for j in 0..4 {
                let mut p = a.clone();
                p[(i, j)] += h;
                let mut m = a.clone();
                m[(i, j)] -= h;
                fd[(i, j)] = (loss(&p) - loss(&m)) / (2.0 * h);
            }
        }
        let rel = abar.sub(&fd).unwrap().frobenius_norm() / fd.frobenius_norm();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn pullback_rejects_singular_r() {
        let f = QrFactors {
            q: DenseMatrix::eye(3, 2),
            r: DenseMatrix::from_diag(&[1.0, 0.0]),
        };
        assert!(matches!(
            qr_pullback(&f, &QrAdjoints::zeros(3, 2)),
            Err(LinalgError::SingularTriangular { index: 1, .. })
        ));
    }
}
