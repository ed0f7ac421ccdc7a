use crate::error::{Error, Result};
use crate::intertwiner::{
    random_element, random_element_for, ActivationKind, Element, MonomialElement,
};
use crate::network::forward::{forward, forward_from, forward_upto, HiddenState};
use crate::network::loss::{mean_loss, LossKind};
use crate::network::spec::{BatchNormParams, LayerWeights, NetworkSpec, WeightSet};
use crate::numerics::{vec_max_diff, Matrix, Rng};

/// One group element per hidden layer, plus a positive per-coordinate scale
/// vector for each batch-norm layer (batch norm absorbs diagonal scalings,
/// which enlarges the symmetry group by one positive-diagonal factor per
/// normalized layer).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    elements: Vec<Element>,
    bn_scales: Vec<Option<Vec<f64>>>,
}

impl GroupAssignment {
    pub fn new(
        spec: &NetworkSpec,
        elements: Vec<Element>,
        bn_scales: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        let ga = Self::new_allow_unequal_residual(spec, elements, bn_scales)?;
        ga.check_residual_equality(spec)?;
        Ok(ga)
    }

    /// Same checks as `new` except the equal-elements requirement on
    /// residual-connected layers; used to demonstrate how unequal elements
    /// break the function.
    pub fn new_allow_unequal_residual(
        spec: &NetworkSpec,
        elements: Vec<Element>,
        bn_scales: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        let k = spec.depth();
        if elements.len() != k - 1 || bn_scales.len() != k - 1 {
            return Err(Error::InvalidSpec(format!(
                "assignment needs {} elements and scale slots",
                k - 1
            )));
        }
        for l in 1..k {
            let el = &elements[l - 1];
            if el.n() != spec.width(l) {
                return Err(Error::shape(
                    "GroupAssignment",
                    format!("layer {l}: element dim {} vs width {}", el.n(), spec.width(l)),
                ));
            }
            let kind = spec.activation(l);
            if el.kind() != kind {
                return Err(Error::KindMismatch {
                    expected: kind.label(),
                    got: el.kind().label(),
                });
            }
            if spec.has_batchnorm(l) {
                if !matches!(el, Element::Monomial(_)) {
                    return Err(Error::Constraint(format!(
                        "layer {l}: batch-norm layers require monomial elements"
                    )));
                }
                let c = bn_scales[l - 1].as_ref().ok_or_else(|| {
                    Error::Constraint(format!("layer {l}: missing batch-norm scale vector"))
                })?;
                if c.len() != spec.width(l) {
                    return Err(Error::shape(
                        "GroupAssignment",
                        format!("layer {l}: scale length {}", c.len()),
                    ));
                }
                if c.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(Error::Constraint(format!(
                        "layer {l}: batch-norm scales must be strictly positive"
                    )));
                }
                // The scale vector rides through the activation, so it must
                // satisfy the kind's diagonal constraint as well.
                if matches!(kind, ActivationKind::Sigmoid | ActivationKind::Rbf)
                    && c.iter().any(|&x| x != 1.0)
                {
                    return Err(Error::Constraint(format!(
                        "layer {l}: {} admits no diagonal scaling; scales must be 1",
                        kind.label()
                    )));
                }
            } else if bn_scales[l - 1].is_some() {
                return Err(Error::Constraint(format!(
                    "layer {l}: scale vector given for a layer without batch norm"
                )));
            }
        }
        Ok(GroupAssignment { elements, bn_scales })
    }

    fn check_residual_equality(&self, spec: &NetworkSpec) -> Result<()> {
        let connected = spec.residual_connected_layers();
        if connected.len() > 1 {
            let first = &self.elements[connected[0] - 1];
            let unequal: Vec<usize> = connected
                .iter()
                .copied()
                .filter(|&l| &self.elements[l - 1] != first)
                .collect();
            if !unequal.is_empty() {
                return Err(Error::UnequalResidualElements(unequal));
            }
        }
        Ok(())
    }

    pub fn identity(spec: &NetworkSpec) -> Self {
        let k = spec.depth();
        let elements = (1..k)
            .map(|l| Element::identity(spec.activation(l), spec.width(l)))
            .collect();
        let bn_scales = (1..k)
            .map(|l| spec.has_batchnorm(l).then(|| vec![1.0; spec.width(l)]))
            .collect();
        GroupAssignment { elements, bn_scales }
    }

    /// Random valid assignment. Residual-connected layers share a single
    /// element; batch-norm layers get monomial elements and a random
    /// positive scale (unit scale where the kind admits none).
    pub fn random(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        let mut ga = Self::random_raw(spec, rng, true)?;
        let connected = spec.residual_connected_layers();
        if let Some(&first) = connected.first() {
            let shared = ga.elements[first - 1].clone();
            for &l in &connected[1..] {
                ga.elements[l - 1] = shared.clone();
            }
        }
        ga.check_residual_equality(spec)?;
        Ok(ga)
    }

    /// Random assignment with independently drawn elements on the
    /// residual-connected layers (invalid on purpose).
    pub fn random_unequal_residual(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        Self::random_raw(spec, rng, false)
    }

    fn random_raw(spec: &NetworkSpec, rng: &mut Rng, _shared: bool) -> Result<Self> {
        let k = spec.depth();
        let mut elements = Vec::with_capacity(k - 1);
        let mut bn_scales = Vec::with_capacity(k - 1);
        for l in 1..k {
            let kind = spec.activation(l);
            let n = spec.width(l);
            let el = if spec.has_batchnorm(l) {
                // Monomial even for the identity activation.
                Element::Monomial(random_element(kind, n, rng)?)
            } else {
                random_element_for(kind, n, rng)?
            };
            elements.push(el);
            bn_scales.push(spec.has_batchnorm(l).then(|| match kind {
                ActivationKind::Sigmoid | ActivationKind::Rbf => vec![1.0; n],
                _ => rng.lognormal_unit_mean(n),
            }));
        }
        Self::new_allow_unequal_residual(spec, elements, bn_scales)
    }

    /// Copy of this assignment with every residual-connected layer set to
    /// the entry layer's element.
    pub fn equalized_residual(&self, spec: &NetworkSpec) -> Self {
        let mut out = self.clone();
        let connected = spec.residual_connected_layers();
        if let Some(&first) = connected.first() {
            let shared = out.elements[first - 1].clone();
            for &l in &connected[1..] {
                out.elements[l - 1] = shared.clone();
            }
        }
        out
    }

    pub fn element(&self, l: usize) -> &Element {
        &self.elements[l - 1]
    }

    pub fn bn_scale(&self, l: usize) -> Option<&Vec<f64>> {
        self.bn_scales[l - 1].as_ref()
    }

    /// Transport element of the post-activation hidden state at a batch-norm
    /// layer: the element's permutation paired with the scale vector. The
    /// diagonal factor of the element itself cancels inside the
    /// normalization.
    fn bn_transport(&self, l: usize) -> Result<MonomialElement> {
        let Element::Monomial(el) = &self.elements[l - 1] else {
            return Err(Error::Constraint(format!(
                "layer {l}: batch-norm layers require monomial elements"
            )));
        };
        let c = self.bn_scales[l - 1]
            .as_ref()
            .ok_or_else(|| Error::Constraint(format!("layer {l}: missing scale vector")))?;
        MonomialElement::new(el.kind(), el.perm().to_vec(), c.clone())
    }

    /// Matrix carrying hidden states at layer m from the original to the
    /// transformed network.
    pub fn transport_matrix(&self, spec: &NetworkSpec, m: usize) -> Result<Matrix> {
        if spec.is_inside_block(m) {
            return Err(Error::InvalidSpec(format!(
                "layer {m} is strictly inside a residual block; transport is not a single matrix"
            )));
        }
        if spec.has_batchnorm(m) {
            Ok(self.bn_transport(m)?.phi().to_matrix())
        } else if spec.residual_connected_layers().contains(&m) {
            // Post-addition states transform by the element itself; in the
            // relu family this coincides with phi.
            Ok(self.elements[m - 1].to_matrix())
        } else {
            Ok(self.elements[m - 1].phi_matrix())
        }
    }

    pub fn transport_inverse_matrix(&self, spec: &NetworkSpec, m: usize) -> Result<Matrix> {
        if spec.has_batchnorm(m) {
            Ok(self.bn_transport(m)?.phi().invert().to_matrix())
        } else if spec.residual_connected_layers().contains(&m) {
            self.elements[m - 1].invert().map(|e| e.to_matrix())
        } else {
            self.elements[m - 1].phi_inverse_matrix()
        }
    }
}

fn apply_monomial_to_bn(
    el: &MonomialElement,
    c: &[f64],
    bn: &BatchNormParams,
) -> BatchNormParams {
    let n = el.n();
    let (perm, diag) = (el.perm(), el.diag());
    let mut out = BatchNormParams {
        gamma: vec![0.0; n],
        beta: vec![0.0; n],
        running_mean: vec![0.0; n],
        running_var: vec![0.0; n],
    };
    for j in 0..n {
        let p = perm[j];
        // The diagonal's sign survives normalization and is folded into the
        // gain so the normalized output transforms by the permutation alone.
        out.gamma[p] = c[j] * diag[j].signum() * bn.gamma[j];
        out.beta[p] = c[j] * bn.beta[j];
        out.running_mean[p] = diag[j] * bn.running_mean[j];
        out.running_var[p] = diag[j] * diag[j] * bn.running_var[j];
    }
    out
}

/// The group action on weights:
/// `W' = (A_1 W_1, A_1 b_1, A_2 W_2 φ(A_1)⁻¹, A_2 b_2, …, W_k φ(A_{k-1})⁻¹, b_k)`,
/// with batch-norm layers transforming `(γ, β)` by the permutation-and-scale
/// factor and the running statistics by the element itself. The realized
/// function is unchanged.
pub fn act_on_weights(spec: &NetworkSpec, w: &WeightSet, ga: &GroupAssignment) -> Result<WeightSet> {
    ga.check_residual_equality(spec)?;
    act_on_weights_unchecked(spec, w, ga)
}

/// The same action without the equal-residual-elements guard. With unequal
/// elements on skip-connected layers the result is NOT functionally
/// equivalent; this exists to demonstrate exactly that failure.
pub fn act_on_weights_unchecked(
    spec: &NetworkSpec,
    w: &WeightSet,
    ga: &GroupAssignment,
) -> Result<WeightSet> {
    crate::network::spec::validate_weights(spec, w)?;
    let k = spec.depth();
    let mut layers = Vec::with_capacity(k);
    let mut prev_inv = Matrix::identity(spec.input_dim());
    for l in 1..=k {
        let lw = w.layer(l);
        if l < k {
            let el = ga.element(l);
            let a = el.to_matrix();
            let new_w = a.matmul(&lw.w)?.matmul(&prev_inv)?;
            if spec.has_batchnorm(l) {
                let Element::Monomial(mono) = el else {
                    return Err(Error::Constraint(format!(
                        "layer {l}: batch-norm layers require monomial elements"
                    )));
                };
                let c = ga.bn_scale(l).expect("validated");
                let bn = lw.bn.as_ref().expect("validated");
                let transport = ga.bn_transport(l)?;
                layers.push(LayerWeights {
                    w: new_w,
                    bias: None,
                    bn: Some(apply_monomial_to_bn(mono, c, bn)),
                });
                prev_inv = transport.phi().invert().to_matrix();
            } else {
                let bias = lw.bias.as_ref().expect("validated");
                let new_bias = el.apply(bias)?;
                layers.push(LayerWeights {
                    w: new_w,
                    bias: Some(new_bias),
                    bn: None,
                });
                prev_inv = el.phi_inverse_matrix()?;
            }
        } else {
            layers.push(LayerWeights {
                w: lw.w.matmul(&prev_inv)?,
                bias: lw.bias.clone(),
                bn: None,
            });
        }
    }
    Ok(WeightSet { layers })
}

/// Max over sampled inputs of ‖f(x, w) − f(x, w2)‖∞.
pub fn verify_function_equal(
    spec: &NetworkSpec,
    w: &WeightSet,
    w2: &WeightSet,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let x = rng.gaussian_vec(spec.input_dim());
        let a = forward(spec, w, &x)?;
        let b = forward(spec, w2, &x)?;
        worst = worst.max(vec_max_diff(&a, &b));
    }
    Ok(worst)
}

/// Max residual of the hidden-state transport at layer m, in both
/// directions: the head satisfies `f_{<=m}(x, W') = T_m · f_{<=m}(x, W)` and
/// the tail satisfies `f_{>m}(h, W') = f_{>m}(T_m⁻¹ h, W)`.
pub fn verify_hidden_transport(
    spec: &NetworkSpec,
    w: &WeightSet,
    ga: &GroupAssignment,
    m: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let w2 = act_on_weights(spec, w, ga)?;
    let t = ga.transport_matrix(spec, m)?;
    let t_inv = ga.transport_inverse_matrix(spec, m)?;
    let mut worst = 0.0f64;
    for _ in 0..n_samples {
        let x = rng.gaussian_vec(spec.input_dim());
        let h_orig = match forward_upto(spec, w, &x, m)? {
            HiddenState::Plain(v) => v,
            HiddenState::InBlock { .. } => unreachable!("transport_matrix rejects in-block m"),
        };
        let h_new = match forward_upto(spec, &w2, &x, m)? {
            HiddenState::Plain(v) => v,
            HiddenState::InBlock { .. } => unreachable!(),
        };
        let expected = t.matvec(&h_orig)?;
        worst = worst.max(vec_max_diff(&h_new, &expected));

        let h = rng.gaussian_vec(spec.width(m));
        let out_new = forward_from(spec, &w2, &HiddenState::Plain(h.clone()), m)?;
        let back = t_inv.matvec(&h)?;
        let out_orig = forward_from(spec, w, &HiddenState::Plain(back), m)?;
        worst = worst.max(vec_max_diff(&out_new, &out_orig));
    }
    Ok(worst)
}

/// Both halves of the residual dichotomy, measured on one network.
#[derive(Debug, Clone)]
pub struct ResidualFailureReport {
    /// Max functional deviation under the unequal-element action.
    pub unequal_deviation: f64,
    /// Max functional deviation once the elements are equalized.
    pub equal_deviation: f64,
}

/// Applies `ga_unequal` as-is (breaking the function) and again after
/// equalizing the residual-connected elements (preserving it), reporting
/// the max functional deviation of each.
pub fn residual_failure_demo(
    spec: &NetworkSpec,
    w: &WeightSet,
    ga_unequal: &GroupAssignment,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<ResidualFailureReport> {
    if spec.residual().is_none() {
        return Err(Error::InvalidSpec(
            "residual_failure_demo needs a residual network".into(),
        ));
    }
    let w_unequal = act_on_weights_unchecked(spec, w, ga_unequal)?;
    let unequal_deviation = verify_function_equal(spec, w, &w_unequal, n_samples, rng)?;
    let ga_equal = ga_unequal.equalized_residual(spec);
    let w_equal = act_on_weights(spec, w, &ga_equal)?;
    let equal_deviation = verify_function_equal(spec, w, &w_equal, n_samples, rng)?;
    Ok(ResidualFailureReport {
        unequal_deviation,
        equal_deviation,
    })
}

/// Losses of the original and transformed weights on one dataset; the
/// action leaves the loss invariant because it leaves the function
/// invariant.
pub fn loss_invariance_check(
    spec: &NetworkSpec,
    w: &WeightSet,
    ga: &GroupAssignment,
    inputs: &Matrix,
    labels: &[usize],
    loss_kind: LossKind,
) -> Result<(f64, f64)> {
    let classes = spec.output_dim();
    let w2 = act_on_weights(spec, w, ga)?;
    let out1 = crate::network::forward::forward_batch(spec, w, inputs)?;
    let out2 = crate::network::forward::forward_batch(spec, &w2, inputs)?;
    Ok((
        mean_loss(&out1, labels, classes, loss_kind)?,
        mean_loss(&out2, labels, classes, loss_kind)?,
    ))
}
