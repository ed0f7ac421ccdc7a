//! Statistical dissimilarity of hidden representations, invariant to the
//! relu group's channel permutations and positive scalings, alongside the
//! orthogonal baselines. Rows of a feature matrix are examples, columns are
//! neurons or channels.

mod io;
mod lsa;
mod tensor4;

pub use io::{
    read_feature_meta, read_features, sidecar_path, write_features, write_features_with_meta,
    FeatureData, FeatureMeta, FEATURE_MAGIC,
};
pub use lsa::linear_sum_assignment;
pub use tensor4::{
    channel_center_normalize, channel_gram, channel_max_kernel, channel_scale_normalize,
    g_relu_cka_4d, g_relu_procrustes_4d, linear_cka_4d, orthogonal_procrustes_4d, FeatureTensor4,
};

use crate::error::{Error, Result};
use crate::numerics::linalg::svd_square;
use crate::numerics::Matrix;

/// N×d activation data (rows = examples, columns = neurons).
pub type FeatureMatrix = Matrix;

/// Divide each column by its Euclidean norm; a column with norm below
/// 1e-12 is an error naming the column.
pub fn column_normalize(x: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut out = x.clone();
    for j in 0..x.cols() {
        let mut norm_sq = 0.0;
        for i in 0..x.rows() {
            norm_sq += x[(i, j)] * x[(i, j)];
        }
        let norm = norm_sq.sqrt();
        if norm <= 1e-12 {
            return Err(Error::ZeroColumn(j));
        }
        for i in 0..x.rows() {
            out[(i, j)] /= norm;
        }
    }
    Ok(out)
}

/// Subtract each column's mean.
pub fn center_columns(x: &FeatureMatrix) -> FeatureMatrix {
    let n = x.rows() as f64;
    let mut out = x.clone();
    for j in 0..x.cols() {
        let mut mean = 0.0;
        for i in 0..x.rows() {
            mean += x[(i, j)];
        }
        mean /= n;
        for i in 0..x.rows() {
            out[(i, j)] -= mean;
        }
    }
    out
}

fn check_same_shape(x: &Matrix, y: &Matrix, ctx: &'static str) -> Result<()> {
    if x.rows() != y.rows() || x.cols() != y.cols() {
        return Err(Error::shape(
            ctx,
            format!("{}x{} vs {}x{}", x.rows(), x.cols(), y.rows(), y.cols()),
        ));
    }
    Ok(())
}

/// Similarity `1 - δ/(2√d)` where δ is the minimum Frobenius distance of
/// the column-normalized features over column permutations; 1 exactly when
/// the features differ by a permutation and positive column scaling.
pub fn g_relu_procrustes(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    check_same_shape(x, y, "g_relu_procrustes")?;
    let xn = column_normalize(x)?;
    let yn = column_normalize(y)?;
    // ‖X̃ - ỸP‖² = ‖X̃‖² + ‖Ỹ‖² - 2 tr(X̃ᵀỸ P), so the best permutation
    // maximizes the trace term. δ itself is then evaluated as an explicit
    // difference: the expanded form cancels catastrophically near δ = 0.
    let gram = xn.transpose().matmul(&yn)?;
    let (perm, _) = linear_sum_assignment(&gram)?;
    let mut delta_sq = 0.0;
    for i in 0..xn.rows() {
        for j in 0..xn.cols() {
            let diff = xn[(i, j)] - yn[(i, perm[j])];
            delta_sq += diff * diff;
        }
    }
    let d = xn.cols() as f64;
    Ok(1.0 - delta_sq.sqrt() / (2.0 * d.sqrt()))
}

/// Orthogonal counterpart: the trace maximum over the orthogonal group is
/// the nuclear norm of the cross-Gram, attained at O = VUᵀ.
pub fn orthogonal_procrustes(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    check_same_shape(x, y, "orthogonal_procrustes")?;
    let xn = column_normalize(x)?;
    let yn = column_normalize(y)?;
    let gram = xn.transpose().matmul(&yn)?;
    let (u, _, v) = svd_square(&gram)?;
    let best = v.matmul(&u.transpose())?;
    let aligned = yn.matmul(&best)?;
    let delta = xn.sub(&aligned)?.frobenius_norm();
    let d = xn.cols() as f64;
    Ok(1.0 - delta / (2.0 * d.sqrt()))
}

/// Kernel whose (i, j) entry is the coordinatewise max of the Hadamard
/// product of rows i and j. Symmetric; the diagonal is the squared max-norm
/// of each row. Invariant to signed column permutations of the input.
pub fn max_kernel(x: &FeatureMatrix) -> Matrix {
    let n = x.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let (ri, rj) = (x.row(i), x.row(j));
            let mut best = f64::NEG_INFINITY;
            for c in 0..x.cols() {
                let v = ri[c] * rj[c];
                if v > best {
                    best = v;
                }
            }
            k[(i, j)] = best;
            k[(j, i)] = best;
        }
    }
    k
}

/// Unbiased Hilbert-Schmidt independence criterion estimator of two N×N
/// symmetric kernels, N >= 4:
/// `[tr(K̃L̃) + (1ᵀK̃1)(1ᵀL̃1)/((N-1)(N-2)) - (2/(N-2))·1ᵀK̃L̃1] / (N(N-3))`
/// with K̃, L̃ the kernels with zeroed diagonals.
pub fn hsic1(k: &Matrix, l: &Matrix) -> Result<f64> {
    if k.rows() != k.cols() || l.rows() != l.cols() || k.rows() != l.rows() {
        return Err(Error::shape(
            "hsic1",
            format!("{}x{} vs {}x{}", k.rows(), k.cols(), l.rows(), l.cols()),
        ));
    }
    let n = k.rows();
    if n < 4 {
        return Err(Error::Degenerate(format!(
            "hsic1 needs at least 4 examples, got {n}"
        )));
    }
    let nf = n as f64;
    let mut trace_kl = 0.0;
    let mut sum_k = 0.0;
    let mut sum_l = 0.0;
    let mut row_k = vec![0.0; n];
    let mut row_l = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let kij = k[(i, j)];
            let lij = l[(i, j)];
            trace_kl += kij * lij;
            sum_k += kij;
            sum_l += lij;
            row_k[i] += kij;
            row_l[i] += lij;
        }
    }
    let cross: f64 = (0..n).map(|i| row_k[i] * row_l[i]).sum();
    let value = (trace_kl + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0))
        - 2.0 * cross / (nf - 2.0))
        / (nf * (nf - 3.0));
    if !value.is_finite() {
        return Err(Error::NonFinite("hsic1"));
    }
    Ok(value)
}

fn cka_from_kernels(k: &Matrix, l: &Matrix) -> Result<f64> {
    let kl = hsic1(k, l)?;
    let kk = hsic1(k, k)?;
    let ll = hsic1(l, l)?;
    let denom = (kk * ll).sqrt();
    if !(denom > 1e-300) || !denom.is_finite() {
        return Err(Error::Degenerate(
            "zero normalization in CKA (degenerate features)".into(),
        ));
    }
    // The unbiased estimator can be marginally negative on independent
    // features; clamp at zero so the similarity lies in [0, 1].
    Ok((kl / denom).max(0.0))
}

/// CKA-style similarity built on the coordinatewise-max kernel: centers
/// columns, normalizes them, and combines the kernels through the unbiased
/// HSIC ratio. Column counts of x and y may differ.
pub fn g_relu_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(
            "g_relu_cka",
            format!("{} vs {} examples", x.rows(), y.rows()),
        ));
    }
    let xn = column_normalize(&center_columns(x))?;
    let yn = column_normalize(&center_columns(y))?;
    cka_from_kernels(&max_kernel(&xn), &max_kernel(&yn))
}

/// Baseline linear CKA: centered linear-kernel Grams through the same
/// unbiased HSIC ratio. Invariant to orthogonal transforms and isotropic
/// scaling.
pub fn linear_cka(x: &FeatureMatrix, y: &FeatureMatrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(
            "linear_cka",
            format!("{} vs {} examples", x.rows(), y.rows()),
        ));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let k = xc.matmul(&xc.transpose())?;
    let l = yc.matmul(&yc.transpose())?;
    cka_from_kernels(&k, &l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intertwiner::{random_element, ActivationKind};
    use crate::numerics::{qr_orthonormalize, Rng};

    fn transform(x: &Matrix, a: &Matrix, v: Option<&[f64]>) -> Matrix {
        let mut out = x.matmul(a).unwrap();
        if let Some(v) = v {
            for i in 0..out.rows() {
                for (o, &vj) in out.row_mut(i).iter_mut().zip(v) {
                    *o += vj;
                }
            }
        }
        out
    }

    #[test]
    fn column_normalize_unit_norms() {
        let mut rng = Rng::new(1);
        let x = rng.gaussian_matrix(40, 7);
        let xn = column_normalize(&x).unwrap();
        for j in 0..7 {
            let norm: f64 = (0..40).map(|i| xn[(i, j)] * xn[(i, j)]).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        // Scaling a column does not change the result.
        let mut x2 = x.clone();
        for i in 0..40 {
            x2[(i, 3)] *= 7.0;
        }
        assert!(column_normalize(&x2).unwrap().max_abs_diff(&xn) < 1e-12);
    }

    #[test]
    fn zero_column_is_reported() {
        let mut x = Matrix::zeros(5, 3);
        x[(0, 0)] = 1.0;
        x[(1, 2)] = 1.0;
        match column_normalize(&x) {
            Err(Error::ZeroColumn(j)) => assert_eq!(j, 1),
            other => panic!("expected zero-column error, got {other:?}"),
        }
    }

    #[test]
    fn procrustes_self_similarity_is_one() {
        let mut rng = Rng::new(2);
        let x = rng.gaussian_matrix(50, 8);
        assert!((g_relu_procrustes(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((orthogonal_procrustes(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn procrustes_alignment_under_group_transform() {
        let mut rng = Rng::new(3);
        let x = rng.gaussian_matrix(60, 10);
        let a = random_element(ActivationKind::Relu, 10, &mut rng)
            .unwrap()
            .to_matrix();
        let y = transform(&x, &a, None);
        let mu = g_relu_procrustes(&x, &y).unwrap();
        assert!((mu - 1.0).abs() < 1e-9, "mu = {mu}");
    }

    #[test]
    fn procrustes_independent_features_below_one() {
        let mut rng = Rng::new(4);
        let x = rng.gaussian_matrix(200, 16);
        let y = rng.gaussian_matrix(200, 16);
        let mu = g_relu_procrustes(&x, &y).unwrap();
        assert!(mu < 0.9, "independent mu = {mu}");
        assert!(mu >= 0.0);
    }

    #[test]
    fn orthogonal_bounds_grelu() {
        // Permutations sit inside the orthogonal group, so the orthogonal
        // similarity can only be larger.
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let x = rng.gaussian_matrix(40, 6);
            let y = rng.gaussian_matrix(40, 6);
            let g = g_relu_procrustes(&x, &y).unwrap();
            let o = orthogonal_procrustes(&x, &y).unwrap();
            assert!(o >= g - 1e-9, "orth {o} < grelu {g}");
        }
    }

    #[test]
    fn orthogonal_procrustes_invariance_signed_permutation() {
        let mut rng = Rng::new(6);
        let x = rng.gaussian_matrix(50, 8);
        // Signed permutations commute with column normalization.
        let a = random_element(ActivationKind::Rbf, 8, &mut rng)
            .unwrap()
            .to_matrix();
        let y = transform(&x, &a, None);
        let mu = orthogonal_procrustes(&x, &y).unwrap();
        assert!((mu - 1.0).abs() < 1e-9, "mu = {mu}");
    }

    #[test]
    fn max_kernel_properties() {
        let mut rng = Rng::new(7);
        let x = column_normalize(&center_columns(&rng.gaussian_matrix(30, 5))).unwrap();
        let k = max_kernel(&x);
        for i in 0..30 {
            let inf: f64 = x.row(i).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!((k[(i, i)] - inf * inf).abs() < 1e-12);
            for j in 0..30 {
                assert_eq!(k[(i, j)], k[(j, i)]);
            }
        }
        // Signed column permutation leaves the kernel unchanged.
        let a = random_element(ActivationKind::Rbf, 5, &mut rng)
            .unwrap()
            .to_matrix();
        let k2 = max_kernel(&x.matmul(&a).unwrap());
        assert!(k.max_abs_diff(&k2) < 1e-12);
    }

    #[test]
    fn max_kernel_basis_rows() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let k = max_kernel(&x);
        assert_eq!(k[(0, 1)], 1.0);
    }

    #[test]
    fn hsic_self_nonnegative_and_null_near_zero() {
        let mut rng = Rng::new(8);
        for _ in 0..10 {
            let x = rng.gaussian_matrix(40, 6);
            let k = x.matmul(&x.transpose()).unwrap();
            assert!(hsic1(&k, &k).unwrap() >= 0.0);
        }
        // Independent kernels: value within 3 sigma of a permutation null.
        let x = rng.gaussian_matrix(60, 6);
        let y = rng.gaussian_matrix(60, 6);
        let k = x.matmul(&x.transpose()).unwrap();
        let l = y.matmul(&y.transpose()).unwrap();
        let observed = hsic1(&k, &l).unwrap();
        let mut null = Vec::new();
        for _ in 0..200 {
            let p = rng.permutation(60);
            let mut lp = Matrix::zeros(60, 60);
            for i in 0..60 {
                for j in 0..60 {
                    lp[(i, j)] = l[(p[i], p[j])];
                }
            }
            null.push(hsic1(&k, &lp).unwrap());
        }
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let sd = (null.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (null.len() - 1) as f64)
            .sqrt();
        assert!(
            (observed - mean).abs() < 3.0 * sd,
            "observed {observed}, null mean {mean} sd {sd}"
        );
    }

    #[test]
    fn hsic_constant_kernel_is_finite() {
        let n = 10;
        let k = Matrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 });
        let v = hsic1(&k, &k).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn hsic_needs_four_examples() {
        let k = Matrix::identity(3);
        assert!(matches!(hsic1(&k, &k), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cka_self_similarity_is_one() {
        let mut rng = Rng::new(9);
        let x = rng.gaussian_matrix(40, 8);
        assert!((g_relu_cka(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn g_relu_cka_alignment_with_translation() {
        let mut rng = Rng::new(10);
        let x = rng.gaussian_matrix(60, 9);
        let a = random_element(ActivationKind::Relu, 9, &mut rng)
            .unwrap()
            .to_matrix();
        let v = rng.gaussian_vec(9);
        let y = transform(&x, &a, Some(&v));
        let mu = g_relu_cka(&x, &y).unwrap();
        assert!((mu - 1.0).abs() < 1e-9, "mu = {mu}");
    }

    #[test]
    fn g_relu_cka_different_widths() {
        let mut rng = Rng::new(11);
        let x = rng.gaussian_matrix(50, 6);
        let y = rng.gaussian_matrix(50, 11);
        let mu = g_relu_cka(&x, &y).unwrap();
        assert!((0.0..=1.0 + 1e-9).contains(&mu));
    }

    #[test]
    fn g_relu_cka_independent_below_half() {
        let mut rng = Rng::new(12);
        let x = rng.gaussian_matrix(200, 16);
        let y = rng.gaussian_matrix(200, 16);
        let mu = g_relu_cka(&x, &y).unwrap();
        assert!(mu < 0.5, "independent mu = {mu}");
    }

    #[test]
    fn linear_cka_orthogonal_invariance() {
        let mut rng = Rng::new(13);
        let x = rng.gaussian_matrix(50, 8);
        let q = qr_orthonormalize(&rng.gaussian_matrix(8, 8), &mut rng).unwrap();
        let y = x.matmul(&q).unwrap();
        let mu = linear_cka(&x, &y).unwrap();
        assert!((mu - 1.0).abs() < 1e-9, "mu = {mu}");
    }

    // Gram-free evaluation of the same HSIC terms through d-dimensional
    // cross-covariances; an independent algebraic route.
    fn linear_cka_oracle(x: &Matrix, y: &Matrix) -> f64 {
        let xc = center_columns(x);
        let yc = center_columns(y);
        let n = xc.rows();
        let nf = n as f64;
        let term = |a: &Matrix, b: &Matrix| -> f64 {
            // tr(K̃L̃) = ‖AᵀB‖² - Σ_i ‖a_i‖²‖b_i‖², with diag corrections.
            let cross = a.transpose().matmul(b).unwrap().frobenius_norm().powi(2);
            let diag: f64 = (0..n)
                .map(|i| {
                    let na: f64 = a.row(i).iter().map(|v| v * v).sum();
                    let nb: f64 = b.row(i).iter().map(|v| v * v).sum();
                    na * nb
                })
                .sum();
            let tr_kl = cross - diag;
            let col_a: Vec<f64> = (0..a.cols())
                .map(|j| (0..n).map(|i| a[(i, j)]).sum())
                .collect();
            let col_b: Vec<f64> = (0..b.cols())
                .map(|j| (0..n).map(|i| b[(i, j)]).sum())
                .collect();
            let sum_k = col_a.iter().map(|v| v * v).sum::<f64>()
                - (0..n).map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
            let sum_l = col_b.iter().map(|v| v * v).sum::<f64>()
                - (0..n).map(|i| b.row(i).iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
            // 1ᵀK̃L̃1 = Σ_i (K1 - K_ii)(L1 - L_ii) with K row sums from
            // a·(Aᵀ1).
            let a_colsum_vec = col_a;
            let b_colsum_vec = col_b;
            let cross_rows: f64 = (0..n)
                .map(|i| {
                    let k_row: f64 = a.row(i)
                        .iter()
                        .zip(&a_colsum_vec)
                        .map(|(&v, &s)| v * s)
                        .sum::<f64>()
                        - a.row(i).iter().map(|v| v * v).sum::<f64>();
                    let l_row: f64 = b.row(i)
                        .iter()
                        .zip(&b_colsum_vec)
                        .map(|(&v, &s)| v * s)
                        .sum::<f64>()
                        - b.row(i).iter().map(|v| v * v).sum::<f64>();
                    k_row * l_row
                })
                .sum();
            (tr_kl + sum_k * sum_l / ((nf - 1.0) * (nf - 2.0)) - 2.0 * cross_rows / (nf - 2.0))
                / (nf * (nf - 3.0))
        };
        let kl = term(&xc, &yc);
        let kk = term(&xc, &xc);
        let ll = term(&yc, &yc);
        (kl / (kk * ll).sqrt()).max(0.0)
    }

    #[test]
    fn linear_cka_matches_algebraic_oracle() {
        let mut rng = Rng::new(14);
        for _ in 0..5 {
            let x = rng.gaussian_matrix(35, 5);
            let y = rng.gaussian_matrix(35, 7);
            let got = linear_cka(&x, &y).unwrap();
            let want = linear_cka_oracle(&x, &y);
            assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        }
    }

    #[test]
    fn iterated_quotient_invariance() {
        // mu(XA + 1v', YB + 1w') = mu(X, Y) for group transforms; the
        // procrustes metric has no centering step so it is tested without
        // the translations.
        let mut rng = Rng::new(15);
        for _ in 0..10 {
            let x = rng.gaussian_matrix(48, 8);
            let y = rng.gaussian_matrix(48, 8);
            let a = random_element(ActivationKind::Relu, 8, &mut rng)
                .unwrap()
                .to_matrix();
            let b = random_element(ActivationKind::Relu, 8, &mut rng)
                .unwrap()
                .to_matrix();
            let v = rng.gaussian_vec(8);
            let w = rng.gaussian_vec(8);

            let base = g_relu_cka(&x, &y).unwrap();
            let moved = g_relu_cka(&transform(&x, &a, Some(&v)), &transform(&y, &b, Some(&w)))
                .unwrap();
            assert!((base - moved).abs() < 1e-9, "cka {base} vs {moved}");

            let base = g_relu_procrustes(&x, &y).unwrap();
            let moved =
                g_relu_procrustes(&transform(&x, &a, None), &transform(&y, &b, None)).unwrap();
            assert!((base - moved).abs() < 1e-9, "procrustes {base} vs {moved}");
        }
    }

    #[test]
    fn max_symmetry_separates_non_monomial_maps() {
        // For a dense non-monomial A some pair of inputs changes the max
        // kernel value; for signed permutations none does.
        let mut rng = Rng::new(16);
        let d = 6;
        let dense = rng.gaussian_matrix(d, d);
        let signed = random_element(ActivationKind::Rbf, d, &mut rng)
            .unwrap()
            .to_matrix();
        let mut dense_deviates = false;
        for _ in 0..200 {
            let x1 = rng.gaussian_vec(d);
            let x2 = rng.gaussian_vec(d);
            let direct = (0..d).map(|c| x1[c] * x2[c]).fold(f64::NEG_INFINITY, f64::max);
            let ax1 = dense.matvec(&x1).unwrap();
            let ax2 = dense.matvec(&x2).unwrap();
            let mapped = (0..d).map(|c| ax1[c] * ax2[c]).fold(f64::NEG_INFINITY, f64::max);
            if (mapped - direct).abs() > 1e-6 {
                dense_deviates = true;
            }
            let sx1 = signed.matvec(&x1).unwrap();
            let sx2 = signed.matvec(&x2).unwrap();
            let s_mapped = (0..d).map(|c| sx1[c] * sx2[c]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(s_mapped, direct);
        }
        assert!(dense_deviates);
    }
}
