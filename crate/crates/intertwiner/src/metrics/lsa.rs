use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Linear sum assignment, maximization form: the permutation π maximizing
/// Σ_i cost[i, π(i)], found by shortest augmenting paths on the negated
/// costs (Jonker–Volgenant). Deterministic: columns are scanned in
/// ascending order and improvements require a strict decrease, so exact
/// ties resolve to the lowest index.
pub fn linear_sum_assignment(cost: &Matrix) -> Result<(Vec<usize>, f64)> {
    if cost.rows() != cost.cols() {
        return Err(Error::shape(
            "linear_sum_assignment",
            format!("{}x{}", cost.rows(), cost.cols()),
        ));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment costs"));
    }
    let n = cost.rows();
    if n == 0 {
        return Ok((vec![], 0.0));
    }
    // Minimize the negated cost. Column n is a virtual start column.
    let a = |i: usize, j: usize| -cost[(i, j)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    // row_of[j] = row currently assigned to column j (n = unassigned).
    let mut row_of = vec![n; n + 1];
    for i in 0..n {
        row_of[n] = i;
        let mut j0 = n;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prev = vec![n; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = n;
            for j in 0..n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < min_to[j] {
                        min_to[j] = cur;
                        prev[j] = j0;
                    }
                    if min_to[j] < delta {
                        delta = min_to[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == n {
                break;
            }
        }
        // Augment along the alternating path.
        while j0 != n {
            let j_prev = prev[j0];
            row_of[j0] = row_of[j_prev];
            j0 = j_prev;
        }
    }
    let mut perm = vec![0usize; n];
    for j in 0..n {
        perm[row_of[j]] = j;
    }
    let mut objective = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        objective += cost[(i, j)];
    }
    Ok((perm, objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    // Exhaustive search over all permutations (Heap's algorithm).
    pub(crate) fn brute_force_max(cost: &Matrix) -> (Vec<usize>, f64) {
        let n = cost.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best_perm = perm.clone();
        let mut best = objective(cost, &perm);
        let mut c = vec![0usize; n];
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                let obj = objective(cost, &perm);
                if obj > best {
                    best = obj;
                    best_perm = perm.clone();
                }
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        (best_perm, best)
    }

    fn objective(cost: &Matrix, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
    }

    #[test]
    fn diagonal_dominant_cost_gives_identity() {
        let mut m = Matrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                m[(i, j)] = if i == j { 10.0 } else { 1.0 };
            }
        }
        let (perm, obj) = linear_sum_assignment(&m).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3, 4]);
        assert_eq!(obj, 50.0);
    }

    #[test]
    fn permutation_cost_recovers_itself() {
        let mut m = Matrix::zeros(4, 4);
        let p = [2usize, 0, 3, 1];
        for (i, &j) in p.iter().enumerate() {
            m[(i, j)] = 1.0;
        }
        let (perm, obj) = linear_sum_assignment(&m).unwrap();
        assert_eq!(perm, p.to_vec());
        assert_eq!(obj, 4.0);
    }

    #[test]
    fn uniform_cost_ties_break_to_identity() {
        let m = Matrix::from_fn(6, 6, |_, _| 0.25);
        let (perm, _) = linear_sum_assignment(&m).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn matches_brute_force_up_to_d7() {
        let mut rng = Rng::new(17);
        for trial in 0..100 {
            let d = 2 + (trial % 6); // 2..=7
            let m = rng.gaussian_matrix(d, d);
            let (_, got) = linear_sum_assignment(&m).unwrap();
            let (_, want) = brute_force_max(&m);
            assert!(
                (got - want).abs() <= 1e-9 * (1.0 + want.abs()),
                "d={d}: lsa {got} vs brute {want}"
            );
        }
    }
}
