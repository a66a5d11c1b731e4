//! Small dense symmetric linear algebra: Cholesky factorisation, triangular
//! solves and a cyclic Jacobi eigensolver.

use ndarray::Array2;

use crate::error::{BciError, Result};

/// Lower-triangular L with A = L Lᵀ.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(BciError::Shape("cholesky needs a square matrix".into()));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(BciError::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / d;
        }
    }
    Ok(l)
}

/// Solve L X = B for lower-triangular L.
pub fn solve_lower(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut v = x[[i, c]];
            for k in 0..i {
                v -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = v / l[[i, i]];
        }
    }
    x
}

/// Solve Lᵀ X = B for lower-triangular L.
pub fn solve_lower_transpose(l: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in (0..n).rev() {
            let mut v = x[[i, c]];
            for k in i + 1..n {
                v -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = v / l[[i, i]];
        }
    }
    x
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(BciError::Shape("eigen-decomposition needs a square matrix".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(BciError::NonFinite("matrix entries"));
    }
    let mut m: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-15 * frob.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[r * n + order[c]]);
    Ok((values, vectors))
}

/// Solve A v = λ B v for symmetric A and symmetric positive-definite B.
///
/// Whitens with the Cholesky factor of B, diagonalises the whitened matrix
/// and maps back. Eigenvalues are descending; eigenvector columns satisfy
/// vᵀ B v = 1.
pub fn generalized_symmetric_eigen(a: &Array2<f64>, b: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    if a.dim() != b.dim() {
        return Err(BciError::Shape("generalized eigenproblem needs matching matrices".into()));
    }
    let l = cholesky(b)?;
    let y = solve_lower(&l, a); // L⁻¹ A
    let c = solve_lower(&l, &y.t().to_owned()); // L⁻¹ (L⁻¹ A)ᵀ = L⁻¹ A L⁻ᵀ
    let c = (&c + &c.t()) * 0.5;
    let (values, u) = symmetric_eigen(&c)?;
    let vectors = solve_lower_transpose(&l, &u);
    Ok((values, vectors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
        g.dot(&g.t()) + Array2::<f64>::eye(n) * 0.1
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = random_spd(7, 1);
        let l = cholesky(&a).unwrap();
        let err = (&l.dot(&l.t()) - &a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12);
        let mut bad = a.clone();
        bad[[0, 0]] = -1.0;
        assert!(matches!(cholesky(&bad), Err(BciError::NotPositiveDefinite { pivot: 0, .. })));
    }

    #[test]
    fn jacobi_diagonalises() {
        let a = random_spd(9, 2) - Array2::<f64>::eye(9);
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let orth = vecs.t().dot(&vecs) - Array2::<f64>::eye(9);
        assert!(orth.iter().all(|v| v.abs() < 1e-12));
        for (k, &lam) in vals.iter().enumerate() {
            let v = vecs.column(k);
            let r = a.dot(&v) - &v * lam;
            assert!(r.iter().all(|x| x.abs() < 1e-11));
        }
        let trace: f64 = (0..9).map(|i| a[[i, i]]).sum();
        assert!((vals.iter().sum::<f64>() - trace).abs() < 1e-11);
    }

    #[test]
    fn generalized_pair() {
        let a = random_spd(6, 3);
        let b = random_spd(6, 4);
        let (vals, v) = generalized_symmetric_eigen(&a, &b).unwrap();
        let gram = v.t().dot(&b).dot(&v) - Array2::<f64>::eye(6);
        assert!(gram.iter().all(|x| x.abs() < 1e-10));
        for (k, &lam) in vals.iter().enumerate() {
            let col = v.column(k);
            let r = a.dot(&col) - b.dot(&col) * lam;
            assert!(r.iter().all(|x| x.abs() < 1e-10));
        }
    }

    #[test]
    fn diagonal_input_is_immediate() {
        let a = Array2::from_diag(&ndarray::arr1(&[1.0, 3.0, 2.0]));
        let (vals, _) = symmetric_eigen(&a).unwrap();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
    }
}
