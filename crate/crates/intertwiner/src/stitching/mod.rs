//! Constrained stitching layers: swap the tail of one frozen network onto
//! the head of another through a trainable map φ, optionally restricted to
//! the relu group via a doubly stochastic relaxation of the permutation
//! factor (projected gradient descent with Sinkhorn re-projection, then
//! Hungarian thresholding at evaluation time).

mod train;

pub use train::{
    bn_recalibrate, run_stitch_pipeline, stitching_penalty, train_stitch, StitchConfig,
    StitchOutcome,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::linear_sum_assignment;
use crate::network::{forward_from, forward_upto, HiddenState, NetworkSpec, WeightSet};
use crate::numerics::Matrix;

/// A stitching map φ: ℝᵈ → ℝᵈ without bias.
#[derive(Debug, Clone, PartialEq)]
pub enum StitchLayer {
    /// Unconstrained linear map.
    FullAffine { m: Matrix },
    /// Rank-r factorization m = u·v with u: d×r, v: r×d.
    ReducedRank { u: Matrix, v: Matrix },
    /// Relu-group element relaxed over the Birkhoff polytope: x ↦ P(λ⊙x)
    /// with P doubly stochastic (a hard permutation after thresholding) and
    /// λ ≥ 0.
    GRelu { p: Matrix, lambda: Vec<f64> },
    /// Differentiable sorting relaxation: x ↦ SoftSort(s, τ)·(e^λ ⊙ x).
    SoftSort {
        s: Vec<f64>,
        tau: f64,
        log_lambda: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchVariant {
    FullAffine,
    ReducedRank,
    GRelu,
    SoftSort,
}

impl std::str::FromStr for StitchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full_affine" | "affine" => Ok(StitchVariant::FullAffine),
            "rank" | "reduced_rank" => Ok(StitchVariant::ReducedRank),
            "grelu" | "g_relu" => Ok(StitchVariant::GRelu),
            "softsort" | "soft_sort" => Ok(StitchVariant::SoftSort),
            other => Err(Error::InvalidSpec(format!("unknown stitch variant '{other}'"))),
        }
    }
}

impl StitchLayer {
    pub fn identity(d: usize) -> StitchLayer {
        StitchLayer::FullAffine {
            m: Matrix::identity(d),
        }
    }

    pub fn from_matrix(m: Matrix) -> StitchLayer {
        StitchLayer::FullAffine { m }
    }

    /// A relu-group layer from an explicit permutation and scaling:
    /// x ↦ P(λ⊙x) with entry (perm[j], j) of P equal to 1.
    pub fn g_relu_exact(perm: &[usize], lambda: Vec<f64>) -> Result<StitchLayer> {
        let d = perm.len();
        if lambda.len() != d {
            return Err(Error::shape("g_relu_exact", "perm/lambda lengths"));
        }
        if lambda.iter().any(|&x| x < 0.0) {
            return Err(Error::Constraint("lambda must be non-negative".into()));
        }
        let mut p = Matrix::zeros(d, d);
        let mut seen = vec![false; d];
        for (j, &i) in perm.iter().enumerate() {
            if i >= d || seen[i] {
                return Err(Error::Constraint("perm is not a bijection".into()));
            }
            seen[i] = true;
            p[(i, j)] = 1.0;
        }
        Ok(StitchLayer::GRelu { p, lambda })
    }

    pub fn variant(&self) -> StitchVariant {
        match self {
            StitchLayer::FullAffine { .. } => StitchVariant::FullAffine,
            StitchLayer::ReducedRank { .. } => StitchVariant::ReducedRank,
            StitchLayer::GRelu { .. } => StitchVariant::GRelu,
            StitchLayer::SoftSort { .. } => StitchVariant::SoftSort,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            StitchLayer::FullAffine { m } => m.rows(),
            StitchLayer::ReducedRank { u, .. } => u.rows(),
            StitchLayer::GRelu { p, .. } => p.rows(),
            StitchLayer::SoftSort { s, .. } => s.len(),
        }
    }

    /// The map as a dense matrix (materializing the SoftSort relaxation).
    pub fn as_matrix(&self) -> Result<Matrix> {
        match self {
            StitchLayer::FullAffine { m } => Ok(m.clone()),
            StitchLayer::ReducedRank { u, v } => u.matmul(v),
            StitchLayer::GRelu { p, lambda } => {
                let mut m = p.clone();
                for i in 0..m.rows() {
                    for j in 0..m.cols() {
                        m[(i, j)] *= lambda[j];
                    }
                }
                Ok(m)
            }
            StitchLayer::SoftSort { s, tau, log_lambda } => {
                let p = softsort(s, *tau)?;
                let mut m = p;
                for i in 0..s.len() {
                    for j in 0..s.len() {
                        m[(i, j)] *= log_lambda[j].exp();
                    }
                }
                Ok(m)
            }
        }
    }

    /// Apply to a batch (rows = samples).
    pub fn apply_batch(&self, h: &Matrix) -> Result<Matrix> {
        let m = self.as_matrix()?;
        h.matmul(&m.transpose())
    }

    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.as_matrix()?.matvec(h)
    }

    /// Snap the relaxed permutation factor to a hard permutation: GRelu via
    /// the assignment solver, SoftSort via row-wise argmax. λ keeps its
    /// trained value. Other variants are returned unchanged.
    pub fn thresholded(&self) -> Result<StitchLayer> {
        match self {
            StitchLayer::GRelu { p, lambda } => {
                // The assignment solver returns a row-to-column map; the
                // exact layer wants column-to-row images.
                let row_to_col = threshold_permutation(p)?;
                let mut col_to_row = vec![0usize; row_to_col.len()];
                for (row, &col) in row_to_col.iter().enumerate() {
                    col_to_row[col] = row;
                }
                StitchLayer::g_relu_exact(&col_to_row, lambda.clone())
            }
            StitchLayer::SoftSort { s, tau, log_lambda } => {
                let p = softsort(s, *tau)?;
                let d = s.len();
                let mut hard = Matrix::zeros(d, d);
                for i in 0..d {
                    let row = p.row(i);
                    let mut best = 0usize;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    hard[(i, best)] = 1.0;
                }
                let mut m = hard;
                for i in 0..d {
                    for j in 0..d {
                        m[(i, j)] *= log_lambda[j].exp();
                    }
                }
                Ok(StitchLayer::FullAffine { m })
            }
            other => Ok(other.clone()),
        }
    }
}

/// Project onto the Birkhoff polytope: clamp negatives to zero, repair any
/// all-zero row or column to uniform 1/d, then run `iters` rounds of
/// column-then-row sum normalization. The final operation is the row
/// normalization, so row sums come out exactly 1.
pub fn sinkhorn_project(m: &Matrix, iters: usize) -> Result<Matrix> {
    if m.rows() != m.cols() {
        return Err(Error::shape("sinkhorn_project", format!("{}x{}", m.rows(), m.cols())));
    }
    let d = m.rows();
    if d == 0 {
        return Ok(m.clone());
    }
    let mut a = m.clone();
    for x in a.as_mut_slice() {
        if !x.is_finite() {
            return Err(Error::NonFinite("sinkhorn input"));
        }
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let uniform = 1.0 / d as f64;
    for i in 0..d {
        if a.row(i).iter().all(|&x| x == 0.0) {
            a.row_mut(i).fill(uniform);
        }
    }
    for j in 0..d {
        if (0..d).all(|i| a[(i, j)] == 0.0) {
            for i in 0..d {
                a[(i, j)] = uniform;
            }
        }
    }
    for _ in 0..iters {
        for j in 0..d {
            let sum: f64 = (0..d).map(|i| a[(i, j)]).sum();
            for i in 0..d {
                a[(i, j)] /= sum;
            }
        }
        for i in 0..d {
            let sum: f64 = a.row(i).iter().sum();
            for x in a.row_mut(i) {
                *x /= sum;
            }
        }
    }
    Ok(a)
}

/// Hard permutation nearest to a relaxed one in the trace sense:
/// `argmax_Q tr(P Qᵀ)`, i.e. the assignment maximizing Σ_i P[i, π(i)].
/// Returns the row-to-column map π.
pub fn threshold_permutation(p: &Matrix) -> Result<Vec<usize>> {
    Ok(linear_sum_assignment(p)?.0)
}

/// Row-stochastic sorting relaxation:
/// `P = softmax_rows(-(sort_desc(s)·1ᵀ - 1·sᵀ)/τ)`.
pub fn softsort(s: &[f64], tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::Constraint(format!("softsort needs tau > 0, got {tau}")));
    }
    let d = s.len();
    let mut sorted = s.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).ok_or(()).expect("finite"));
    let mut p = Matrix::zeros(d, d);
    for i in 0..d {
        let mut max_e = f64::NEG_INFINITY;
        let mut row = vec![0.0; d];
        for j in 0..d {
            let e = -(sorted[i] - s[j]).abs() / tau;
            row[j] = e;
            if e > max_e {
                max_e = e;
            }
        }
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max_e).exp();
            denom += *v;
        }
        for (j, v) in row.iter().enumerate() {
            p[(i, j)] = v / denom;
        }
    }
    Ok(p)
}

/// A stitched network: f's layers up to `layer_index`, the stitch map, then
/// g's layers after it. Both parents stay frozen and borrowed.
pub struct StitchedNet<'a> {
    pub f_spec: &'a NetworkSpec,
    pub f_w: &'a WeightSet,
    pub g_spec: &'a NetworkSpec,
    pub g_w: &'a WeightSet,
    pub layer_index: usize,
    pub stitch: StitchLayer,
}

/// Validate and assemble a stitched network. The stitch sits at an
/// activation layer; stitching strictly inside a residual block is refused
/// unless `allow_in_block` (it provably cannot recover the function — the
/// pending skip inherits an uncancelled group factor).
pub fn build_stitched<'a>(
    f_spec: &'a NetworkSpec,
    f_w: &'a WeightSet,
    g_spec: &'a NetworkSpec,
    g_w: &'a WeightSet,
    layer_index: usize,
    stitch: StitchLayer,
    allow_in_block: bool,
) -> Result<StitchedNet<'a>> {
    crate::network::validate_weights(f_spec, f_w)?;
    crate::network::validate_weights(g_spec, g_w)?;
    let l = layer_index;
    if !(1..f_spec.depth()).contains(&l) || !(1..g_spec.depth()).contains(&l) {
        return Err(Error::InvalidSpec(format!(
            "stitch layer {l} must be a hidden layer of both networks"
        )));
    }
    if f_spec.width(l) != g_spec.width(l) {
        return Err(Error::shape(
            "build_stitched",
            format!("widths {} vs {} at layer {l}", f_spec.width(l), g_spec.width(l)),
        ));
    }
    if stitch.dim() != f_spec.width(l) {
        return Err(Error::shape(
            "build_stitched",
            format!("stitch dim {} vs width {}", stitch.dim(), f_spec.width(l)),
        ));
    }
    let inside = f_spec.is_inside_block(l) || g_spec.is_inside_block(l);
    if inside {
        if !allow_in_block {
            return Err(Error::InvalidSpec(format!(
                "layer {l} is strictly inside a residual block"
            )));
        }
        if f_spec != g_spec {
            return Err(Error::InvalidSpec(
                "in-block stitching requires identical architectures".into(),
            ));
        }
    }
    Ok(StitchedNet {
        f_spec,
        f_w,
        g_spec,
        g_w,
        layer_index: l,
        stitch,
    })
}

impl StitchedNet<'_> {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let l = self.layer_index;
        match forward_upto(self.f_spec, self.f_w, x, l)? {
            HiddenState::Plain(h) => {
                let z = self.stitch.apply(&h)?;
                forward_from(self.g_spec, self.g_w, &HiddenState::Plain(z), l)
            }
            HiddenState::InBlock { trunk, partial } => {
                // The trunk value rides through from the head network; only
                // the in-block value passes through the stitch.
                let z = self.stitch.apply(&partial)?;
                forward_from(
                    self.g_spec,
                    self.g_w,
                    &HiddenState::InBlock { trunk, partial: z },
                    l,
                )
            }
        }
    }

    pub fn forward_batch(&self, xs: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(xs.rows(), self.g_spec.output_dim());
        for i in 0..xs.rows() {
            let y = self.forward(xs.row(i))?;
            out.row_mut(i).copy_from_slice(&y);
        }
        Ok(out)
    }

    pub fn accuracy(&self, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(crate::network::accuracy(&self.forward_batch(inputs)?, labels))
    }

    /// Same network with a different stitch map.
    pub fn with_stitch(&self, stitch: StitchLayer) -> StitchedNet<'_> {
        StitchedNet {
            f_spec: self.f_spec,
            f_w: self.f_w,
            g_spec: self.g_spec,
            g_w: self.g_w,
            layer_index: self.layer_index,
            stitch,
        }
    }
}

// JSON wire form for stitch layers; matrices as nested row arrays.
#[derive(Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
enum StitchLayerRepr {
    FullAffine {
        m: Vec<Vec<f64>>,
    },
    ReducedRank {
        u: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
    GRelu {
        p: Vec<Vec<f64>>,
        lambda: Vec<f64>,
    },
    SoftSort {
        s: Vec<f64>,
        tau: f64,
        log_lambda: Vec<f64>,
    },
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

impl StitchLayer {
    pub fn to_json(&self) -> serde_json::Value {
        let repr = match self {
            StitchLayer::FullAffine { m } => StitchLayerRepr::FullAffine { m: rows_of(m) },
            StitchLayer::ReducedRank { u, v } => StitchLayerRepr::ReducedRank {
                u: rows_of(u),
                v: rows_of(v),
            },
            StitchLayer::GRelu { p, lambda } => StitchLayerRepr::GRelu {
                p: rows_of(p),
                lambda: lambda.clone(),
            },
            StitchLayer::SoftSort { s, tau, log_lambda } => StitchLayerRepr::SoftSort {
                s: s.clone(),
                tau: *tau,
                log_lambda: log_lambda.clone(),
            },
        };
        serde_json::to_value(repr).expect("stitch serialization cannot fail")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<StitchLayer> {
        let repr: StitchLayerRepr = serde_json::from_value(value.clone())?;
        Ok(match repr {
            StitchLayerRepr::FullAffine { m } => StitchLayer::FullAffine {
                m: Matrix::from_rows(&m)?,
            },
            StitchLayerRepr::ReducedRank { u, v } => StitchLayer::ReducedRank {
                u: Matrix::from_rows(&u)?,
                v: Matrix::from_rows(&v)?,
            },
            StitchLayerRepr::GRelu { p, lambda } => StitchLayer::GRelu {
                p: Matrix::from_rows(&p)?,
                lambda,
            },
            StitchLayerRepr::SoftSort { s, tau, log_lambda } => {
                StitchLayer::SoftSort { s, tau, log_lambda }
            }
        })
    }
}
