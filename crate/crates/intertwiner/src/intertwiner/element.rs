use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intertwiner::kind::ActivationKind;
use crate::numerics::{lu_inverse, Matrix, Rng};

/// Absolute tolerance for structural membership testing of dense matrices.
pub const MEMBERSHIP_TOL: f64 = 1e-12;

/// A group element stored in factored monomial form: a permutation together
/// with per-coordinate diagonal factors. As a matrix it has entry
/// `(perm[j], j) = diag[j]`. Storing the factors rather than a dense matrix
/// enforces group membership by construction and makes composition O(n).
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialElement {
    kind: ActivationKind,
    /// 0-based images: column j maps to row perm[j].
    perm: Vec<usize>,
    diag: Vec<f64>,
}

/// A dense invertible element; only the identity activation admits these
/// (its group is all of GL_n). Keeping them in a separate type stops dense
/// matrices from leaking into the monomial invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralElement {
    matrix: Matrix,
}

/// Either element form.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    Monomial(MonomialElement),
    General(GeneralElement),
}

fn check_diag(kind: ActivationKind, diag: &[f64]) -> Result<()> {
    let bad = |msg: String| Err(Error::Constraint(msg));
    match kind {
        ActivationKind::Relu | ActivationKind::LeakyRelu { .. } => {
            if let Some(&d) = diag.iter().find(|d| **d <= 0.0) {
                return bad(format!("{} needs strictly positive diagonal, got {d}", kind.label()));
            }
        }
        ActivationKind::Rbf => {
            if let Some(&d) = diag.iter().find(|d| d.abs() != 1.0) {
                return bad(format!("rbf needs diagonal entries in {{+1,-1}}, got {d}"));
            }
        }
        ActivationKind::Sigmoid => {
            if let Some(&d) = diag.iter().find(|d| **d != 1.0) {
                return bad(format!("sigmoid admits only permutations (diag 1), got {d}"));
            }
        }
        ActivationKind::Polynomial { .. } | ActivationKind::Identity => {
            if let Some(&d) = diag.iter().find(|d| d.abs() < MEMBERSHIP_TOL) {
                return bad(format!("{} needs nonzero diagonal, got {d}", kind.label()));
            }
        }
    }
    Ok(())
}

impl MonomialElement {
    pub fn new(kind: ActivationKind, perm: Vec<usize>, diag: Vec<f64>) -> Result<Self> {
        kind.validate()?;
        let n = perm.len();
        if diag.len() != n {
            return Err(Error::shape("MonomialElement", "perm and diag lengths differ"));
        }
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::Constraint("perm is not a bijection".into()));
            }
            seen[p] = true;
        }
        if diag.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("monomial diagonal"));
        }
        check_diag(kind, &diag)?;
        Ok(MonomialElement { kind, perm, diag })
    }

    pub fn identity(kind: ActivationKind, n: usize) -> Self {
        MonomialElement {
            kind,
            perm: (0..n).collect(),
            diag: vec![1.0; n],
        }
    }

    /// A pure permutation (diagonal all ones) of the given kind.
    pub fn permutation(kind: ActivationKind, perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        MonomialElement::new(kind, perm, vec![1.0; n])
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(j, &p)| p == j) && self.diag.iter().all(|&d| d == 1.0)
    }

    pub fn to_matrix(&self) -> Matrix {
        let n = self.n();
        let mut m = Matrix::zeros(n, n);
        for j in 0..n {
            m[(self.perm[j], j)] = self.diag[j];
        }
        m
    }

    /// Apply the element to a vector: `y[perm[j]] = diag[j] * x[j]`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n());
        let mut y = vec![0.0; self.n()];
        for j in 0..self.n() {
            y[self.perm[j]] = self.diag[j] * x[j];
        }
        y
    }

    /// Group product `self * other` (self applied second).
    pub fn compose(&self, other: &MonomialElement) -> Result<MonomialElement> {
        self.check_compatible(other)?;
        let n = self.n();
        let mut perm = vec![0usize; n];
        let mut diag = vec![0.0; n];
        for j in 0..n {
            perm[j] = self.perm[other.perm[j]];
            diag[j] = self.diag[other.perm[j]] * other.diag[j];
        }
        MonomialElement::new(self.kind, perm, diag)
    }

    pub fn invert(&self) -> MonomialElement {
        let n = self.n();
        let mut perm = vec![0usize; n];
        let mut diag = vec![0.0; n];
        for j in 0..n {
            perm[self.perm[j]] = j;
            diag[self.perm[j]] = 1.0 / self.diag[j];
        }
        MonomialElement {
            kind: self.kind,
            perm,
            diag,
        }
    }

    /// The paired post-activation element: identity on the factors for
    /// ReLU/LeakyReLU/Sigmoid, absolute value of the diagonal for RBF, and
    /// the d-th entrywise power for polynomials. The permutation never
    /// changes.
    pub fn phi(&self) -> MonomialElement {
        let diag = match self.kind {
            ActivationKind::Rbf => self.diag.iter().map(|d| d.abs()).collect(),
            ActivationKind::Polynomial { degree } => {
                self.diag.iter().map(|d| d.powi(degree as i32)).collect()
            }
            _ => self.diag.clone(),
        };
        MonomialElement {
            kind: self.kind,
            perm: self.perm.clone(),
            diag,
        }
    }

    /// The permutation part with the diagonal replaced by ones.
    pub fn permutation_part(&self) -> MonomialElement {
        MonomialElement {
            kind: self.kind,
            perm: self.perm.clone(),
            diag: vec![1.0; self.n()],
        }
    }

    fn check_compatible(&self, other: &MonomialElement) -> Result<()> {
        if self.kind != other.kind {
            return Err(Error::KindMismatch {
                expected: self.kind.label(),
                got: other.kind.label(),
            });
        }
        if self.n() != other.n() {
            return Err(Error::shape("compose", format!("{} vs {}", self.n(), other.n())));
        }
        Ok(())
    }
}

impl GeneralElement {
    /// A dense element; invertibility is checked at construction.
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::shape(
                "GeneralElement",
                format!("{}x{}", matrix.rows(), matrix.cols()),
            ));
        }
        lu_inverse(&matrix)?;
        Ok(GeneralElement { matrix })
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn invert(&self) -> Result<GeneralElement> {
        Ok(GeneralElement {
            matrix: lu_inverse(&self.matrix)?,
        })
    }

    pub fn compose(&self, other: &GeneralElement) -> Result<GeneralElement> {
        Ok(GeneralElement {
            matrix: self.matrix.matmul(&other.matrix)?,
        })
    }
}

impl Element {
    pub fn n(&self) -> usize {
        match self {
            Element::Monomial(e) => e.n(),
            Element::General(e) => e.n(),
        }
    }

    pub fn kind(&self) -> ActivationKind {
        match self {
            Element::Monomial(e) => e.kind(),
            Element::General(_) => ActivationKind::Identity,
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        match self {
            Element::Monomial(e) => e.to_matrix(),
            Element::General(e) => e.matrix().clone(),
        }
    }

    /// φ as a dense matrix. For monomial elements this is the closed form;
    /// for dense identity-activation elements φ is the element itself.
    pub fn phi_matrix(&self) -> Matrix {
        match self {
            Element::Monomial(e) => e.phi().to_matrix(),
            Element::General(e) => e.matrix().clone(),
        }
    }

    /// φ(A)⁻¹ as a dense matrix, exact for monomial elements.
    pub fn phi_inverse_matrix(&self) -> Result<Matrix> {
        match self {
            Element::Monomial(e) => Ok(e.phi().invert().to_matrix()),
            Element::General(e) => lu_inverse(e.matrix()),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Element::Monomial(e) => Ok(e.apply(x)),
            Element::General(e) => e.matrix().matvec(x),
        }
    }

    pub fn invert(&self) -> Result<Element> {
        match self {
            Element::Monomial(e) => Ok(Element::Monomial(e.invert())),
            Element::General(e) => Ok(Element::General(e.invert()?)),
        }
    }

    pub fn compose(&self, other: &Element) -> Result<Element> {
        match (self, other) {
            (Element::Monomial(a), Element::Monomial(b)) => Ok(Element::Monomial(a.compose(b)?)),
            (Element::General(a), Element::General(b)) => Ok(Element::General(a.compose(b)?)),
            _ => Err(Error::KindMismatch {
                expected: "matching element forms".into(),
                got: "monomial vs general".into(),
            }),
        }
    }

    pub fn identity(kind: ActivationKind, n: usize) -> Element {
        match kind {
            ActivationKind::Identity => Element::General(GeneralElement {
                matrix: Matrix::identity(n),
            }),
            _ => Element::Monomial(MonomialElement::identity(kind, n)),
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Element::Monomial(e) => e.is_identity(),
            Element::General(e) => e.matrix().max_abs_diff(&Matrix::identity(e.n())) == 0.0,
        }
    }
}

/// Sample a random monomial element of the given kind: uniform permutation,
/// diagonal drawn per kind (ReLU/LeakyReLU: lognormal rescaled to unit mean;
/// RBF: uniform signs; polynomial and identity: signed lognormal magnitudes;
/// sigmoid: ones).
pub fn random_element(kind: ActivationKind, n: usize, rng: &mut Rng) -> Result<MonomialElement> {
    let perm = rng.permutation(n);
    let diag = match kind {
        ActivationKind::Relu | ActivationKind::LeakyRelu { .. } => rng.lognormal_unit_mean(n),
        ActivationKind::Rbf => (0..n).map(|_| rng.sign()).collect(),
        ActivationKind::Sigmoid => vec![1.0; n],
        ActivationKind::Polynomial { .. } | ActivationKind::Identity => {
            let mags = rng.lognormal_unit_mean(n);
            mags.into_iter().map(|m| m * rng.sign()).collect()
        }
    };
    MonomialElement::new(kind, perm, diag)
}

/// Sample a dense invertible element for the identity activation, redrawing
/// on the (vanishingly rare) singular sample.
pub fn random_general_element(n: usize, rng: &mut Rng) -> Result<GeneralElement> {
    for _ in 0..8 {
        if let Ok(e) = GeneralElement::new(rng.gaussian_matrix(n, n)) {
            return Ok(e);
        }
    }
    Err(Error::NonConvergence {
        what: "random invertible matrix draw",
        iters: 8,
    })
}

/// Random element in the form matching the kind: dense for identity,
/// monomial otherwise.
pub fn random_element_for(kind: ActivationKind, n: usize, rng: &mut Rng) -> Result<Element> {
    match kind {
        ActivationKind::Identity => Ok(Element::General(random_general_element(n, rng)?)),
        _ => Ok(Element::Monomial(random_element(kind, n, rng)?)),
    }
}

/// Structural membership test for a dense matrix: exactly one entry above
/// tolerance per row and column, with the surviving entries satisfying the
/// kind's diagonal constraint.
pub fn is_member(kind: ActivationKind, a: &Matrix, tol: f64) -> bool {
    if a.rows() != a.cols() {
        return false;
    }
    let n = a.rows();
    if kind == ActivationKind::Identity {
        return lu_inverse(a).is_ok();
    }
    let mut perm = vec![usize::MAX; n];
    let mut diag = vec![0.0; n];
    let mut used_row = vec![false; n];
    for j in 0..n {
        let mut found = None;
        for i in 0..n {
            if a[(i, j)].abs() > tol {
                if found.is_some() {
                    return false; // two nonzeros in one column
                }
                found = Some(i);
            }
        }
        let Some(i) = found else { return false };
        if used_row[i] {
            return false;
        }
        used_row[i] = true;
        perm[j] = i;
        diag[j] = a[(i, j)];
    }
    let constraint_ok = match kind {
        ActivationKind::Relu | ActivationKind::LeakyRelu { .. } => diag.iter().all(|&d| d > 0.0),
        ActivationKind::Rbf => diag.iter().all(|&d| (d.abs() - 1.0).abs() <= tol),
        ActivationKind::Sigmoid => diag.iter().all(|&d| (d - 1.0).abs() <= tol),
        ActivationKind::Polynomial { .. } => true,
        ActivationKind::Identity => unreachable!(),
    };
    constraint_ok
}

// JSON wire form. Permutations are serialized 1-based.
#[derive(Serialize, Deserialize)]
struct ElementRepr {
    #[serde(flatten)]
    kind: ActivationKind,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perm: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    matrix: Option<Vec<Vec<f64>>>,
}

impl Element {
    pub fn to_json(&self) -> serde_json::Value {
        let repr = match self {
            Element::Monomial(e) => ElementRepr {
                kind: e.kind(),
                n: e.n(),
                perm: Some(e.perm().iter().map(|p| p + 1).collect()),
                diag: Some(e.diag().to_vec()),
                matrix: None,
            },
            Element::General(e) => ElementRepr {
                kind: ActivationKind::Identity,
                n: e.n(),
                perm: None,
                diag: None,
                matrix: Some((0..e.n()).map(|i| e.matrix().row(i).to_vec()).collect()),
            },
        };
        serde_json::to_value(repr).expect("element serialization cannot fail")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Element> {
        let repr: ElementRepr = serde_json::from_value(value.clone())?;
        match (repr.perm, repr.diag, repr.matrix) {
            (Some(perm1), Some(diag), None) => {
                let mut perm = Vec::with_capacity(perm1.len());
                for p in perm1 {
                    if p == 0 || p > repr.n {
                        return Err(Error::Constraint(format!(
                            "1-based perm image {p} out of range for n={}",
                            repr.n
                        )));
                    }
                    perm.push(p - 1);
                }
                if perm.len() != repr.n || diag.len() != repr.n {
                    return Err(Error::shape("element json", "perm/diag length != n"));
                }
                Ok(Element::Monomial(MonomialElement::new(repr.kind, perm, diag)?))
            }
            (None, None, Some(rows)) => {
                if repr.kind != ActivationKind::Identity {
                    return Err(Error::Constraint(
                        "dense matrix elements are only valid for the identity activation".into(),
                    ));
                }
                let m = Matrix::from_rows(&rows)?;
                if m.rows() != repr.n {
                    return Err(Error::shape("element json", "matrix size != n"));
                }
                Ok(Element::General(GeneralElement::new(m)?))
            }
            _ => Err(Error::Constraint(
                "element json needs either perm+diag or matrix".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_el(perm: Vec<usize>, diag: Vec<f64>) -> MonomialElement {
        MonomialElement::new(ActivationKind::Relu, perm, diag).unwrap()
    }

    #[test]
    fn to_matrix_layout() {
        // Columns map through the permutation: entry (perm[j], j) = diag[j].
        let e = relu_el(vec![1, 0], vec![2.0, 3.0]);
        let m = e.to_matrix();
        let expect = Matrix::from_rows(&[vec![0.0, 3.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(m, expect);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = Rng::new(3);
        for kind in [
            ActivationKind::Relu,
            ActivationKind::Rbf,
            ActivationKind::polynomial(3).unwrap(),
            ActivationKind::Sigmoid,
        ] {
            let e = random_element(kind, 7, &mut rng).unwrap();
            let prod = e.compose(&e.invert()).unwrap();
            assert!(prod.perm().iter().enumerate().all(|(j, &p)| p == j));
            for &d in prod.diag() {
                assert!((d - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = Rng::new(8);
        for _ in 0..20 {
            let a = random_element(ActivationKind::Relu, 6, &mut rng).unwrap();
            let b = random_element(ActivationKind::Relu, 6, &mut rng).unwrap();
            let lhs = a.compose(&b).unwrap().to_matrix();
            let rhs = a.to_matrix().matmul(&b.to_matrix()).unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-14);
        }
    }

    #[test]
    fn compose_pure_permutations() {
        let a = MonomialElement::permutation(ActivationKind::Sigmoid, vec![1, 2, 0]).unwrap();
        let b = MonomialElement::permutation(ActivationKind::Sigmoid, vec![2, 1, 0]).unwrap();
        let c = a.compose(&b).unwrap();
        // (a∘b)(j) = a.perm[b.perm[j]]
        assert_eq!(c.perm(), &[0, 2, 1]);
        assert!(c.diag().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn constraint_enforcement() {
        assert!(MonomialElement::new(ActivationKind::Relu, vec![0, 1], vec![1.0, -2.0]).is_err());
        assert!(MonomialElement::new(ActivationKind::Rbf, vec![0, 1], vec![1.0, 0.5]).is_err());
        assert!(MonomialElement::new(ActivationKind::Sigmoid, vec![0, 1], vec![1.0, 2.0]).is_err());
        let poly = ActivationKind::polynomial(2).unwrap();
        assert!(MonomialElement::new(poly, vec![0, 1], vec![1.0, 0.0]).is_err());
        assert!(MonomialElement::new(poly, vec![0, 1], vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn phi_closed_forms() {
        // ReLU: phi is the identity map on the element.
        let e = relu_el(vec![1, 0], vec![3.0, 0.5]);
        assert_eq!(e.phi(), e);
        // RBF: diagonal becomes all ones.
        let r = MonomialElement::new(ActivationKind::Rbf, vec![0, 1], vec![-1.0, 1.0]).unwrap();
        assert_eq!(r.phi().diag(), &[1.0, 1.0]);
        assert_eq!(r.phi().perm(), r.perm());
        // Polynomial degree 3: diagonal is cubed.
        let p = MonomialElement::new(
            ActivationKind::polynomial(3).unwrap(),
            vec![0, 1],
            vec![-2.0, 1.0],
        )
        .unwrap();
        assert_eq!(p.phi().diag(), &[-8.0, 1.0]);
    }

    #[test]
    fn random_element_respects_constraints() {
        let mut rng = Rng::new(77);
        let e = random_element(ActivationKind::Relu, 16, &mut rng).unwrap();
        assert!(e.diag().iter().all(|&d| d > 0.0));
        let mean = e.diag().iter().sum::<f64>() / 16.0;
        assert_eq!(mean, 1.0);

        let same = random_element(ActivationKind::Relu, 16, &mut Rng::new(77)).unwrap();
        assert_eq!(e, same);

        let r = random_element(ActivationKind::Rbf, 9, &mut rng).unwrap();
        assert!(r.diag().iter().all(|&d| d.abs() == 1.0));
    }

    #[test]
    fn membership_structural_test() {
        let e = relu_el(vec![2, 0, 1], vec![0.5, 1.5, 2.5]);
        assert!(is_member(ActivationKind::Relu, &e.to_matrix(), MEMBERSHIP_TOL));
        // Negative entry fails ReLU but passes polynomial.
        let mut m = e.to_matrix();
        m[(2, 0)] = -0.5;
        assert!(!is_member(ActivationKind::Relu, &m, MEMBERSHIP_TOL));
        assert!(is_member(ActivationKind::polynomial(2).unwrap(), &m, MEMBERSHIP_TOL));
        // A dense matrix is not monomial.
        let dense = Matrix::from_rows(&[vec![1.0, 0.2], vec![0.3, 1.0]]).unwrap();
        assert!(!is_member(ActivationKind::Relu, &dense, MEMBERSHIP_TOL));
    }

    #[test]
    fn element_json_round_trip() {
        let mut rng = Rng::new(4);
        let e = Element::Monomial(random_element(ActivationKind::Relu, 5, &mut rng).unwrap());
        let v = e.to_json();
        assert_eq!(v["kind"], "relu");
        // 1-based images on the wire.
        let perm_json: Vec<u64> = v["perm"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_u64().unwrap())
            .collect();
        assert!(perm_json.iter().all(|&p| (1..=5).contains(&p)));
        let back = Element::from_json(&v).unwrap();
        assert_eq!(e, back);

        let g = Element::General(random_general_element(3, &mut rng).unwrap());
        let back = Element::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
    }
}
