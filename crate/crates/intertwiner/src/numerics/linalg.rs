use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::Rng;

/// Relative pivot threshold below which LU factorization reports the matrix
/// as singular.
const PIVOT_TOL: f64 = 1e-12;

/// Inverses with an infinity-norm condition estimate above this bound are
/// rejected rather than returned silently inaccurate.
const MAX_CONDITION: f64 = 1e12;

/// Matrix inverse via LU with partial pivoting.
///
/// A pivot smaller than `1e-12 * max|entry|` reports `Singular`; a condition
/// estimate `‖A‖∞·‖A⁻¹‖∞` above 1e12 reports `IllConditioned`.
pub fn lu_inverse(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape("lu_inverse", format!("{}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    let scale = a.max_abs();
    if scale == 0.0 {
        return Err(Error::Singular { pivot: 0.0, step: 0 });
    }
    let tol = PIVOT_TOL * scale;

    // Factor PA = LU in place; perm tracks the row exchanges.
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        let mut best = lu[(k, k)].abs();
        for i in k + 1..n {
            let v = lu[(i, k)].abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < tol {
            return Err(Error::Singular { pivot: best, step: k });
        }
        if p != k {
            perm.swap(p, k);
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(p, j)];
                lu[(p, j)] = tmp;
            }
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let m = lu[(i, k)] / pivot;
            lu[(i, k)] = m;
            for j in k + 1..n {
                lu[(i, j)] -= m * lu[(k, j)];
            }
        }
    }

    // Solve for each unit vector.
    let mut inv = Matrix::zeros(n, n);
    let mut col = vec![0.0; n];
    for e in 0..n {
        for (i, c) in col.iter_mut().enumerate() {
            *c = if perm[i] == e { 1.0 } else { 0.0 };
        }
        for i in 1..n {
            let mut acc = col[i];
            for j in 0..i {
                acc -= lu[(i, j)] * col[j];
            }
            col[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = col[i];
            for j in i + 1..n {
                acc -= lu[(i, j)] * col[j];
            }
            col[i] = acc / lu[(i, i)];
        }
        for i in 0..n {
            inv[(i, e)] = col[i];
        }
    }

    let cond = a.norm_inf() * inv.norm_inf();
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::IllConditioned { cond });
    }
    Ok(inv)
}

/// Orthonormalize the columns of a square Gaussian-filled matrix by modified
/// Gram–Schmidt (two passes per column), normalizing the determinant sign
/// to +1. A rank-deficient column is redrawn from `rng`, with a bounded
/// number of retries.
pub fn qr_orthonormalize(a: &Matrix, rng: &mut Rng) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape(
            "qr_orthonormalize",
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    let n = a.rows();
    let mut q = a.clone();
    let mut retries = 0usize;
    let mut j = 0usize;
    while j < n {
        // Column j as a working vector.
        let mut v: Vec<f64> = (0..n).map(|i| q[(i, j)]).collect();
        for _pass in 0..2 {
            for prev in 0..j {
                let mut dot = 0.0;
                for i in 0..n {
                    dot += q[(i, prev)] * v[i];
                }
                for i in 0..n {
                    v[i] -= dot * q[(i, prev)];
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            retries += 1;
            if retries > 16 {
                return Err(Error::NonConvergence {
                    what: "qr_orthonormalize column redraw",
                    iters: retries,
                });
            }
            for i in 0..n {
                q[(i, j)] = rng.gaussian();
            }
            continue;
        }
        for i in 0..n {
            q[(i, j)] = v[i] / norm;
        }
        j += 1;
    }
    if det_sign(&q) < 0.0 {
        for i in 0..n {
            q[(i, n - 1)] = -q[(i, n - 1)];
        }
    }
    Ok(q)
}

/// Sign of det(A) via LU with partial pivoting (0.0 when singular).
fn det_sign(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut m = a.clone();
    let mut sign = 1.0;
    for k in 0..n {
        let mut p = k;
        let mut best = m[(k, k)].abs();
        for i in k + 1..n {
            if m[(i, k)].abs() > best {
                best = m[(i, k)].abs();
                p = i;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if p != k {
            sign = -sign;
            for j in 0..n {
                let tmp = m[(k, j)];
                m[(k, j)] = m[(p, j)];
                m[(p, j)] = tmp;
            }
        }
        if m[(k, k)] < 0.0 {
            sign = -sign;
        }
        for i in k + 1..n {
            let f = m[(i, k)] / m[(k, k)];
            for j in k + 1..n {
                m[(i, j)] -= f * m[(k, j)];
            }
        }
    }
    sign
}

/// Singular values (descending) by one-sided Jacobi: rotate column pairs of
/// a working copy until all pairs are numerically orthogonal, then read the
/// singular values off as column norms.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    let work = if a.rows() >= a.cols() { a.clone() } else { a.transpose() };
    let (m, n) = (work.rows(), work.cols());
    if n == 0 || m == 0 {
        return Ok(vec![]);
    }
    if n > 256 {
        return Err(Error::shape(
            "singular_values",
            format!("min dimension {n} exceeds supported 256"),
        ));
    }
    let mut u = work;
    let scale = u.max_abs();
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    const MAX_SWEEPS: usize = 64;
    let tol = 1e-14;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let x = u[(i, p)];
                    let y = u[(i, q)];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let x = u[(i, p)];
                    let y = u[(i, q)];
                    u[(i, p)] = c * x - s * y;
                    u[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            let mut sv: Vec<f64> = (0..n)
                .map(|j| (0..m).map(|i| u[(i, j)] * u[(i, j)]).sum::<f64>().sqrt())
                .collect();
            sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
            return Ok(sv);
        }
    }
    Err(Error::NonConvergence {
        what: "one-sided Jacobi SVD",
        iters: MAX_SWEEPS,
    })
}

/// Nuclear norm: the sum of singular values.
pub fn nuclear_norm(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.iter().sum())
}

/// Full SVD of a square matrix, `a = U · diag(sigma) · Vᵀ`, by the same
/// one-sided Jacobi sweep with the rotations accumulated into V. Columns
/// belonging to numerically zero singular values are completed to an
/// orthonormal U basis.
pub fn svd_square(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if a.rows() != a.cols() {
        return Err(Error::shape("svd_square", format!("{}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    if n == 0 {
        return Ok((Matrix::zeros(0, 0), vec![], Matrix::zeros(0, 0)));
    }
    let mut b = a.clone();
    let mut v = Matrix::identity(n);
    const MAX_SWEEPS: usize = 64;
    let tol = 1e-14;
    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..n {
                    let x = b[(i, p)];
                    let y = b[(i, q)];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= tol * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let x = b[(i, p)];
                    let y = b[(i, q)];
                    b[(i, p)] = c * x - s * y;
                    b[(i, q)] = s * x + c * y;
                    let xv = v[(i, p)];
                    let yv = v[(i, q)];
                    v[(i, p)] = c * xv - s * yv;
                    v[(i, q)] = s * xv + c * yv;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "one-sided Jacobi SVD",
            iters: MAX_SWEEPS,
        });
    }
    let mut sigma = vec![0.0; n];
    let mut u = Matrix::zeros(n, n);
    let mut deficient = Vec::new();
    let mut max_sigma = 0.0f64;
    for j in 0..n {
        let norm = (0..n).map(|i| b[(i, j)] * b[(i, j)]).sum::<f64>().sqrt();
        sigma[j] = norm;
        max_sigma = max_sigma.max(norm);
        if norm > 0.0 {
            for i in 0..n {
                u[(i, j)] = b[(i, j)] / norm;
            }
        }
    }
    let rank_tol = 1e-13 * max_sigma.max(1e-300);
    for j in 0..n {
        if sigma[j] <= rank_tol {
            deficient.push(j);
        }
    }
    // Orthonormal completion for the null directions.
    for &j in &deficient {
        let mut chosen = None;
        'candidates: for cand in 0..n {
            let mut col: Vec<f64> = (0..n).map(|i| if i == cand { 1.0 } else { 0.0 }).collect();
            for _pass in 0..2 {
                for other in 0..n {
                    if other == j || deficient.contains(&other) && other >= j {
                        continue;
                    }
                    let dot: f64 = (0..n).map(|i| u[(i, other)] * col[i]).sum();
                    for i in 0..n {
                        col[i] -= dot * u[(i, other)];
                    }
                }
            }
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                for i in 0..n {
                    u[(i, j)] = col[i] / norm;
                }
                chosen = Some(cand);
                break 'candidates;
            }
        }
        if chosen.is_none() {
            return Err(Error::NonConvergence {
                what: "SVD null-space completion",
                iters: n,
            });
        }
    }
    Ok((u, sigma, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(entries: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(entries.len(), entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    #[test]
    fn inverse_of_identity() {
        let inv = lu_inverse(&Matrix::identity(4)).unwrap();
        assert_eq!(inv, Matrix::identity(4));
    }

    #[test]
    fn inverse_of_diagonal() {
        let inv = lu_inverse(&diag(&[2.0, 4.0])).unwrap();
        assert_eq!(inv, diag(&[0.5, 0.25]));
    }

    #[test]
    fn inverse_residual_small() {
        let mut rng = Rng::new(17);
        for n in [3usize, 8, 32, 64] {
            // Diagonally dominated draw keeps the matrix well conditioned.
            let mut a = rng.gaussian_matrix(n, n);
            for i in 0..n {
                a[(i, i)] += 4.0;
            }
            let inv = lu_inverse(&a).unwrap();
            let resid = a.matmul(&inv).unwrap().sub(&Matrix::identity(n)).unwrap();
            assert!(resid.norm_inf() < 1e-10, "n={n}: {}", resid.norm_inf());
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(lu_inverse(&a), Err(Error::Singular { .. })));
    }

    #[test]
    fn orthonormalize_gaussian() {
        let mut rng = Rng::new(5);
        for n in [1usize, 2, 8, 33] {
            let g = rng.gaussian_matrix(n, n);
            let q = qr_orthonormalize(&g, &mut rng).unwrap();
            let gram = q.transpose().matmul(&q).unwrap();
            assert!(gram.sub(&Matrix::identity(n)).unwrap().norm_inf() < 1e-10);
            assert!(det_sign(&q) > 0.0);
        }
    }

    #[test]
    fn orthonormalize_one_by_one() {
        let mut rng = Rng::new(1);
        let g = Matrix::from_rows(&[vec![-2.5]]).unwrap();
        let q = qr_orthonormalize(&g, &mut rng).unwrap();
        // Determinant normalization flips the sign to +1.
        assert_eq!(q[(0, 0)], 1.0);
    }

    #[test]
    fn orthonormalize_preserves_orthogonal_input_up_to_sign() {
        let q0 = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let mut rng = Rng::new(2);
        let q = qr_orthonormalize(&q0, &mut rng).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((q[(i, j)].abs() - q0[(i, j)].abs()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn nuclear_norm_of_diag() {
        assert!((nuclear_norm(&diag(&[3.0, 4.0])).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn nuclear_norm_of_orthogonal_is_n() {
        let mut rng = Rng::new(13);
        for n in [2usize, 5, 16] {
            let g = rng.gaussian_matrix(n, n);
            let q = qr_orthonormalize(&g, &mut rng).unwrap();
            assert!((nuclear_norm(&q).unwrap() - n as f64).abs() < 1e-9);
        }
    }

    // Independent oracle: eigenvalues of AᵀA by power iteration with
    // deflation; singular values are their square roots.
    fn nuclear_norm_eig_oracle(a: &Matrix) -> f64 {
        let d = a.cols().min(a.rows());
        let at = a.transpose();
        let mut b = if a.rows() >= a.cols() {
            at.matmul(a).unwrap()
        } else {
            a.matmul(&at).unwrap()
        };
        let n = b.rows();
        let mut total = 0.0;
        let mut rng = Rng::new(999);
        for _ in 0..d {
            let mut v = rng.gaussian_vec(n);
            let mut lambda = 0.0;
            for _ in 0..20_000 {
                let w = b.matvec(&v).unwrap();
                let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-30 {
                    lambda = 0.0;
                    break;
                }
                v = w.iter().map(|x| x / norm).collect();
                lambda = norm;
            }
            if lambda <= 0.0 {
                break;
            }
            total += lambda.sqrt();
            for i in 0..n {
                for j in 0..n {
                    b[(i, j)] -= lambda * v[i] * v[j];
                }
            }
        }
        total
    }

    #[test]
    fn nuclear_norm_matches_eigenvalue_oracle() {
        let mut rng = Rng::new(21);
        let a = rng.gaussian_matrix(6, 4);
        let got = nuclear_norm(&a).unwrap();
        let want = nuclear_norm_eig_oracle(&a);
        assert!(
            (got - want).abs() < 1e-6 * want.max(1.0),
            "jacobi {got} vs eig {want}"
        );
    }

    #[test]
    fn svd_square_reconstructs() {
        let mut rng = Rng::new(41);
        for n in [1usize, 2, 6, 17] {
            let a = rng.gaussian_matrix(n, n);
            let (u, sigma, v) = svd_square(&a).unwrap();
            let mut us = u.clone();
            for j in 0..n {
                for i in 0..n {
                    us[(i, j)] *= sigma[j];
                }
            }
            let back = us.matmul(&v.transpose()).unwrap();
            assert!(back.max_abs_diff(&a) < 1e-10, "n={n}");
            let eye = Matrix::identity(n);
            assert!(u.transpose().matmul(&u).unwrap().sub(&eye).unwrap().norm_inf() < 1e-10);
            assert!(v.transpose().matmul(&v).unwrap().sub(&eye).unwrap().norm_inf() < 1e-10);
        }
    }

    #[test]
    fn svd_square_rank_deficient() {
        // Rank-1 matrix: one positive singular value, orthonormal U anyway.
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let (u, sigma, v) = svd_square(&a).unwrap();
        let positive = sigma.iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(positive, 1);
        let eye = Matrix::identity(2);
        assert!(u.transpose().matmul(&u).unwrap().sub(&eye).unwrap().norm_inf() < 1e-10);
        let mut us = u.clone();
        for j in 0..2 {
            for i in 0..2 {
                us[(i, j)] *= sigma[j];
            }
        }
        assert!(us.matmul(&v.transpose()).unwrap().max_abs_diff(&a) < 1e-10);
    }

    #[test]
    fn nuclear_norm_orthogonal_invariance() {
        let mut rng = Rng::new(31);
        let a = rng.gaussian_matrix(6, 6);
        let base = nuclear_norm(&a).unwrap();
        for _ in 0..5 {
            let u = qr_orthonormalize(&rng.gaussian_matrix(6, 6), &mut rng).unwrap();
            let v = qr_orthonormalize(&rng.gaussian_matrix(6, 6), &mut rng).unwrap();
            let rotated = u.matmul(&a).unwrap().matmul(&v).unwrap();
            assert!((nuclear_norm(&rotated).unwrap() - base).abs() < 1e-8);
        }
    }
}
