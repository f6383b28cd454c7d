//! Singular values by one-sided Jacobi rotations.

use super::DenseMatrix;
use crate::error::LinalgError;

/// Sweeps stop once every column pair satisfies
/// `|aᵢ·aⱼ| <= SVD_TOLERANCE * |aᵢ| |aⱼ|`.
pub const SVD_TOLERANCE: f64 = 1e-12;
pub const SVD_MAX_SWEEPS: usize = 100;

/// Singular values in descending order.
pub fn singular_values(a: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    a.check_finite("singular_values")?;
    // Orthogonalize the columns of the tall orientation; store them as rows
    // so each column is contiguous.
    let mut w = if a.rows() >= a.cols() { a.transpose() } else { a.clone() };
    let (n, len) = w.shape();
    if n == 0 || len == 0 {
        return Ok(vec![0.0; n]);
    }
    let mut norms: Vec<f64> = (0..n).map(|i| super::dot(w.row(i), w.row(i))).collect();

    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                let gamma = super::dot(w.row(p), w.row(q));
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = w.data_mut().split_at_mut(q * len);
                let rp = &mut lo[p * len..(p + 1) * len];
                let rq = &mut hi[..len];
                for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                norms[p] = super::dot(rp, rp);
                norms[q] = super::dot(rq, rq);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = norms.into_iter().map(f64::sqrt).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Determinant by Gaussian elimination with partial pivoting.
    fn det(a: &DenseMatrix) -> f64 {
        let n = a.rows();
        let mut m = a.clone();
        let mut d = 1.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[(i, c)].abs().total_cmp(&m[(j, c)].abs())).unwrap();
            if p != c {
                for j in 0..n {
                    let t = m[(c, j)];
                    m[(c, j)] = m[(p, j)];
                    m[(p, j)] = t;
                }
                d = -d;
            }
            d *= m[(c, c)];
            for i in c + 1..n {
                let f = m[(i, c)] / m[(c, c)];
                for j in c..n {
                    m[(i, j)] -= f * m[(c, j)];
                }
            }
        }
        d
    }

    #[test]
    fn identity_and_diagonal() {
        let s = singular_values(&DenseMatrix::identity(4)).unwrap();
        assert!(close(&s, &[1.0; 4], 1e-15));
        let s = singular_values(&DenseMatrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert!(close(&s, &[3.0, 2.0, 1.0], 1e-15));
    }

    #[test]
    fn product_matches_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DenseMatrix::from_fn(6, 6, |_, _| StandardNormal.sample(&mut rng));
        let prod: f64 = singular_values(&a).unwrap().iter().product();
        let d = det(&a).abs();
        assert!(((prod - d) / d).abs() < 1e-8);
    }

    #[test]
    fn squares_sum_to_frobenius_and_shape_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DenseMatrix::from_fn(7, 3, |_, _| StandardNormal.sample(&mut rng));
        let s = singular_values(&a).unwrap();
        assert_eq!(s.len(), 3);
        let sum: f64 = s.iter().map(|x| x * x).sum();
        let f2 = a.frobenius_norm().powi(2);
        assert!(((sum - f2) / f2).abs() < 1e-10);
        let st = singular_values(&a.transpose()).unwrap();
        assert!(close(&s, &st, 1e-12));
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rank_one_has_one_nonzero_value() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [2.0, 1.0, -1.0];
        let a = DenseMatrix::from_fn(4, 3, |i, j| u[i] * v[j]);
        let s = singular_values(&a).unwrap();
        let expect = super::super::norm2(&u) * super::super::norm2(&v);
        assert!((s[0] - expect).abs() < 1e-12);
        assert!(s[1] < 1e-12 && s[2] < 1e-12);
    }

    #[test]
    fn nonfinite_is_rejected() {
        let mut a = DenseMatrix::identity(2);
        a[(1, 1)] = f64::INFINITY;
        assert!(singular_values(&a).is_err());
    }
}
