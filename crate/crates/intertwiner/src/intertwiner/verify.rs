use crate::error::Result;
use crate::intertwiner::element::Element;
use crate::intertwiner::kind::{phi_general, ActivationKind};
use crate::numerics::{vec_max_diff, Matrix, Rng};

/// Default ray scalings for the stabilizer check; 1 is excluded because
/// scaling by 1 never leaves a ray.
pub const DEFAULT_RAY_SCALINGS: [f64; 2] = [0.5, 2.0];

/// Max over sampled Gaussian inputs of ‖σ(Ax) − φ(A)σ(x)‖∞. Elements of the
/// group drive this to round-off; matrices outside it leave a visible
/// residual.
pub fn verify_intertwining(e: &Element, n_samples: usize, rng: &mut Rng) -> Result<f64> {
    let n = e.n();
    let kind = e.kind();
    let phi = match e {
        Element::Monomial(m) => Element::Monomial(m.phi()),
        Element::General(g) => Element::General(g.clone()),
    };
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let x = rng.gaussian_vec(n);
        let ax = e.apply(&x)?;
        let lhs = kind.apply(&ax)?;
        let sx = kind.apply(&x)?;
        let rhs = phi.apply(&sx)?;
        worst = worst.max(vec_max_diff(&lhs, &rhs));
    }
    Ok(worst)
}

/// Same residual for an arbitrary dense matrix, pairing it with the general
/// formula φ(A) = σ(A)σ(I)⁻¹. This is the numerical membership probe: any A
/// actually in the group satisfies the identity with exactly this φ.
pub fn verify_intertwining_matrix(
    kind: ActivationKind,
    a: &Matrix,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let phi = phi_general(kind, a)?;
    let n = a.rows();
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let x = rng.gaussian_vec(n);
        let ax = a.matvec(&x)?;
        let lhs = kind.apply(&ax)?;
        let sx = kind.apply(&x)?;
        let rhs = phi.matvec(&sx)?;
        worst = worst.max(vec_max_diff(&lhs, &rhs));
    }
    Ok(worst)
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Same ray test: w = λ·u for some λ > 0, up to relative tolerance.
fn same_ray(u: &[f64], w: &[f64]) -> bool {
    if is_zero(u) || is_zero(w) {
        return is_zero(u) && is_zero(w);
    }
    // Anchor on u's largest coordinate.
    let (imax, umax) = u
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite"))
        .expect("nonempty");
    let lambda = w[imax] / umax;
    if !(lambda > 0.0) {
        return false;
    }
    let scale = u.iter().fold(0.0f64, |m, &x| m.max(x.abs())) * lambda.max(1.0);
    u.iter()
        .zip(w)
        .all(|(&ui, &wi)| (wi - lambda * ui).abs() <= 1e-12 * scale.max(1e-300))
}

/// Number of distinct rays among `{v} ∪ {D(t)·v : t ∈ t_values}`, where D(t)
/// scales the first nonzero coordinate of v by t. Vectors with at least two
/// nonzero coordinates escape their ray under any scaling t ≠ 1; axis
/// vectors ±e_j never do.
pub fn ray_orbit_cardinality(v: &[f64], t_values: &[f64]) -> usize {
    assert!(!is_zero(v), "ray_orbit_cardinality needs v != 0");
    let first_nonzero = v.iter().position(|&x| x != 0.0).expect("nonzero vector");
    let mut vectors: Vec<Vec<f64>> = vec![v.to_vec()];
    for &t in t_values {
        let mut w = v.to_vec();
        w[first_nonzero] *= t;
        vectors.push(w);
    }
    let mut reps: Vec<Vec<f64>> = Vec::new();
    for w in vectors {
        if !reps.iter().any(|r| same_ray(r, &w)) {
            reps.push(w);
        }
    }
    reps.len()
}
