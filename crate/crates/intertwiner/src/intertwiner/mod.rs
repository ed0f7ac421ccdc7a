//! Symmetry groups of coordinatewise nonlinearities.
//!
//! For an activation σ applied coordinatewise on ℝⁿ, the group collects the
//! invertible matrices A for which some invertible B satisfies
//! σ ∘ A = B ∘ σ; the map φ sending A to its paired B is a group
//! homomorphism with general formula φ(A) = σ(A)·σ(Iₙ)⁻¹. For every
//! nonlinear σ here the elements are monomial (permutation × diagonal) with
//! a per-kind diagonal constraint and a closed-form φ; the identity
//! activation admits all of GLₙ.

mod element;
mod kind;
mod verify;

pub use element::{
    is_member, random_element, random_element_for, random_general_element, Element,
    GeneralElement, MonomialElement, MEMBERSHIP_TOL,
};
pub use kind::{
    phi_general, sigma_identity_invertible, sigma_identity_invertible_from_values,
    sigma_identity_matrix, ActivationKind, POLY_INPUT_BOUND, POLY_MAX_DEGREE,
};
pub use verify::{
    ray_orbit_cardinality, verify_intertwining, verify_intertwining_matrix, DEFAULT_RAY_SCALINGS,
};
