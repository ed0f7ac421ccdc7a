//! The symmetry group of each activation: sample elements, check the
//! defining identity σ(Ax) = φ(A)σ(x) numerically, compare the closed-form
//! φ against the general formula σ(A)σ(I)⁻¹, and watch the ray-stabilizer
//! property single out the coordinate axes for relu.
//!
//! Run with: cargo run --release --example intertwiner_groups

use intertwiner::intertwiner::{
    phi_general, random_element, ray_orbit_cardinality, verify_intertwining,
    verify_intertwining_matrix, ActivationKind, Element, DEFAULT_RAY_SCALINGS,
};
use intertwiner::numerics::{Matrix, Rng};

fn main() -> intertwiner::Result<()> {
    let mut rng = Rng::new(2024);
    let kinds = [
        ActivationKind::Identity,
        ActivationKind::Sigmoid,
        ActivationKind::Relu,
        ActivationKind::leaky_relu(0.1)?,
        ActivationKind::Rbf,
        ActivationKind::polynomial(3)?,
    ];

    println!("defining identity, 500 random inputs, n = 12:");
    for kind in kinds {
        let element = match kind {
            ActivationKind::Identity => {
                Element::General(intertwiner::intertwiner::random_general_element(12, &mut rng)?)
            }
            _ => Element::Monomial(random_element(kind, 12, &mut rng)?),
        };
        let residual = verify_intertwining(&element, 500, &mut rng)?;
        println!("  {:<18} residual {:.2e}", kind.label(), residual);
    }

    println!("\nclosed form vs general formula (phi = sigma(A) sigma(I)^-1):");
    for kind in kinds.into_iter().skip(1) {
        let e = random_element(kind, 8, &mut rng)?;
        let closed = e.phi().to_matrix();
        let general = phi_general(kind, &e.to_matrix())?;
        println!(
            "  {:<18} max deviation {:.2e}",
            kind.label(),
            closed.max_abs_diff(&general)
        );
    }

    // A dense matrix with mixed signs is not in the relu group, and the
    // probe sees it immediately.
    let dense = Matrix::from_rows(&[vec![1.0, -0.7], vec![-0.4, 1.0]])?;
    let residual = verify_intertwining_matrix(ActivationKind::Relu, &dense, 200, &mut rng)?;
    println!("\ndense non-monomial matrix under relu: residual {residual:.3}");

    // Rays spanned by coordinate axes are the only finite stabilized set:
    // scaling one coordinate moves every other ray.
    println!("\nray orbits under coordinate scalings t in {DEFAULT_RAY_SCALINGS:?}:");
    for v in [vec![1.0, 0.0, 0.0], vec![0.0, -1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.3, -0.2, 0.9]]
    {
        let rays = ray_orbit_cardinality(&v, &DEFAULT_RAY_SCALINGS);
        println!("  v = {v:?} -> {rays} distinct rays");
    }
    Ok(())
}
