use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lu_inverse, Matrix};

/// Polynomial activations refuse inputs beyond this magnitude so f64
/// round-off stays far below the verification tolerances.
pub const POLY_INPUT_BOUND: f64 = 1e3;

/// Maximum supported polynomial degree.
pub const POLY_MAX_DEGREE: u32 = 8;

/// The nonlinearity applied coordinatewise at a hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Identity,
    Sigmoid,
    Relu,
    LeakyRelu { slope: f64 },
    Rbf,
    Polynomial { degree: u32 },
}

impl ActivationKind {
    /// LeakyReLU with negative slope in (0, 1). Slope 1 makes the activation
    /// the identity map, whose symmetry group is no longer monomial, so it
    /// is rejected.
    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Constraint(format!(
                "LeakyReLU slope must lie in (0, 1), got {slope}"
            )));
        }
        Ok(ActivationKind::LeakyRelu { slope })
    }

    pub fn polynomial(degree: u32) -> Result<Self> {
        if degree == 0 || degree > POLY_MAX_DEGREE {
            return Err(Error::Constraint(format!(
                "polynomial degree must lie in 1..={POLY_MAX_DEGREE}, got {degree}"
            )));
        }
        Ok(ActivationKind::Polynomial { degree })
    }

    /// Re-check the parameter invariants (after deserialization).
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::LeakyRelu { slope } => Self::leaky_relu(slope).map(|_| ()),
            ActivationKind::Polynomial { degree } => Self::polynomial(degree).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// The scalar activation.
    pub fn sigma(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Identity => x,
            ActivationKind::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            ActivationKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ActivationKind::Rbf => (2.0 * std::f64::consts::PI).sqrt().recip() * (-0.5 * x * x).exp(),
            ActivationKind::Polynomial { degree } => x.powi(degree as i32),
        }
    }

    /// Derivative of the scalar activation. At the ReLU kink the subgradient
    /// 0 is used; LeakyReLU at 0 takes the positive-branch slope 1.
    pub fn sigma_prime(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Identity => 1.0,
            ActivationKind::Sigmoid => {
                let s = self.sigma(x);
                s * (1.0 - s)
            }
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Rbf => -x * self.sigma(x),
            ActivationKind::Polynomial { degree } => f64::from(degree) * x.powi(degree as i32 - 1),
        }
    }

    /// Coordinatewise activation with the documented overflow guard:
    /// polynomial inputs beyond `POLY_INPUT_BOUND` and non-finite outputs
    /// are errors, never silent infinities.
    pub fn apply(&self, xs: &[f64]) -> Result<Vec<f64>> {
        if let ActivationKind::Polynomial { .. } = self {
            if let Some(&bad) = xs.iter().find(|x| x.abs() > POLY_INPUT_BOUND) {
                return Err(Error::Overflow(format!(
                    "polynomial input {bad} exceeds bound {POLY_INPUT_BOUND}"
                )));
            }
        }
        let out: Vec<f64> = xs.iter().map(|&x| self.sigma(x)).collect();
        if out.iter().any(|y| !y.is_finite()) {
            return Err(Error::Overflow("non-finite activation output".into()));
        }
        Ok(out)
    }

    /// Human-readable form, e.g. for error messages and CSV headers.
    pub fn label(&self) -> String {
        match *self {
            ActivationKind::Identity => "identity".into(),
            ActivationKind::Sigmoid => "sigmoid".into(),
            ActivationKind::Relu => "relu".into(),
            ActivationKind::LeakyRelu { slope } => format!("leaky_relu({slope})"),
            ActivationKind::Rbf => "rbf".into(),
            ActivationKind::Polynomial { degree } => format!("polynomial({degree})"),
        }
    }
}

/// σ(I_n): σ(1) on the diagonal, σ(0) elsewhere.
pub fn sigma_identity_matrix(kind: ActivationKind, n: usize) -> Matrix {
    let s1 = kind.sigma(1.0);
    let s0 = kind.sigma(0.0);
    Matrix::from_fn(n, n, |i, j| if i == j { s1 } else { s0 })
}

/// Whether σ(I_n) is invertible, decided from the two scalar values σ(0)
/// and σ(1): the eigenvalues of σ(I_n) are σ(1)−σ(0) (multiplicity n−1) and
/// σ(1)+(n−1)σ(0).
pub fn sigma_identity_invertible_from_values(sigma0: f64, sigma1: f64, n: usize) -> bool {
    sigma1 != sigma0 && sigma1 != -((n as f64) - 1.0) * sigma0
}

pub fn sigma_identity_invertible(kind: ActivationKind, n: usize) -> bool {
    sigma_identity_invertible_from_values(kind.sigma(0.0), kind.sigma(1.0), n)
}

/// The post-activation transform paired with `a`: σ applied entrywise,
/// right-multiplied by σ(I_n)⁻¹. Only meaningful when σ(I_n) is invertible.
pub fn phi_general(kind: ActivationKind, a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape("phi_general", format!("{}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    if !sigma_identity_invertible(kind, n) {
        return Err(Error::Singular { pivot: 0.0, step: 0 });
    }
    let mut sig_a = Matrix::zeros(n, n);
    for i in 0..n {
        let row = kind.apply(a.row(i))?;
        sig_a.row_mut(i).copy_from_slice(&row);
    }
    let sig_i_inv = lu_inverse(&sigma_identity_matrix(kind, n))?;
    sig_a.matmul(&sig_i_inv)
}
