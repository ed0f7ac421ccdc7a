use crate::error::{Error, Result};
use crate::network::{LossKind, NetworkSpec, WeightSet};
use crate::numerics::Matrix;

/// Batch-norm evaluation mode: training normalizes by batch statistics,
/// inference by the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Inference,
}

/// Per-layer gradient tensors, mirroring `LayerWeights`.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w: Matrix,
    pub bias: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Gradients for a contiguous range of layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// 1-based index of the first layer covered.
    pub first_layer: usize,
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn layer(&self, l: usize) -> &LayerGrads {
        &self.layers[l - self.first_layer]
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| {
            g.w.is_finite()
                && g.bias.iter().flatten().all(|x| x.is_finite())
                && g.gamma.iter().flatten().all(|x| x.is_finite())
                && g.beta.iter().flatten().all(|x| x.is_finite())
        })
    }
}

pub(crate) struct LayerCache {
    /// Input to the activation (post batch norm when present). Logits for
    /// the final layer.
    pre_act: Matrix,
    /// State after activation and any skip addition.
    post: Matrix,
    /// Normalized values and batch statistics, for train-mode batch norm.
    bn_normalized: Option<Matrix>,
    bn_batch_mean: Option<Vec<f64>>,
    bn_batch_var: Option<Vec<f64>>,
}

pub(crate) struct RangeForward {
    start: usize,
    stop: usize,
    caches: Vec<LayerCache>,
}

impl RangeForward {
    pub(crate) fn output(&self) -> &Matrix {
        &self.caches.last().expect("at least one layer").post
    }

    pub(crate) fn bn_batch_stats(&self, l: usize) -> Option<(&[f64], &[f64])> {
        let c = &self.caches[l - self.start - 1];
        match (&c.bn_batch_mean, &c.bn_batch_var) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }
}

fn add_bias_rows(z: &mut Matrix, b: &[f64]) {
    for i in 0..z.rows() {
        for (x, bj) in z.row_mut(i).iter_mut().zip(b) {
            *x += bj;
        }
    }
}

/// Forward over layers `start+1 ..= stop` on a row-per-sample batch,
/// keeping the caches backward needs. When `start` is a skip-connected
/// layer the input batch doubles as the trunk state.
pub(crate) fn forward_range(
    spec: &NetworkSpec,
    w: &WeightSet,
    input: &Matrix,
    start: usize,
    stop: usize,
    mode: BnMode,
) -> Result<RangeForward> {
    let k = spec.depth();
    debug_assert!(start < stop && stop <= k);
    let connected = spec.residual_connected_layers();
    let entry = spec.residual_entry();
    let mut h = input.clone();
    let mut trunk: Option<Matrix> = if connected.contains(&start) {
        Some(input.clone())
    } else {
        None
    };
    let mut caches = Vec::with_capacity(stop - start);
    for l in start + 1..=stop {
        let lw = w.layer(l);
        let mut z = h.matmul(&lw.w.transpose())?;
        if let Some(b) = &lw.bias {
            add_bias_rows(&mut z, b);
        }
        let mut bn_normalized = None;
        let mut bn_batch_mean = None;
        let mut bn_batch_var = None;
        if let Some(bn) = &lw.bn {
            let rows = z.rows();
            let cols = z.cols();
            match mode {
                BnMode::Inference => {
                    for i in 0..rows {
                        let row = z.row_mut(i);
                        for j in 0..cols {
                            row[j] = bn.gamma[j] * (row[j] - bn.running_mean[j])
                                / bn.running_var[j].sqrt()
                                + bn.beta[j];
                        }
                    }
                }
                BnMode::Train => {
                    if rows < 2 {
                        return Err(Error::Degenerate(
                            "train-mode batch norm needs batches of at least 2".into(),
                        ));
                    }
                    let m = rows as f64;
                    let mut mean = vec![0.0; cols];
                    for i in 0..rows {
                        for (mu, &x) in mean.iter_mut().zip(z.row(i)) {
                            *mu += x;
                        }
                    }
                    for mu in mean.iter_mut() {
                        *mu /= m;
                    }
                    let mut var = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            let d = z[(i, j)] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    for v in var.iter_mut() {
                        *v /= m;
                    }
                    if var.iter().any(|&v| v <= 0.0) {
                        return Err(Error::Degenerate(
                            "zero batch variance in batch norm".into(),
                        ));
                    }
                    let mut normalized = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            normalized[(i, j)] = (z[(i, j)] - mean[j]) / var[j].sqrt();
                            z[(i, j)] = bn.gamma[j] * normalized[(i, j)] + bn.beta[j];
                        }
                    }
                    bn_normalized = Some(normalized);
                    bn_batch_mean = Some(mean);
                    bn_batch_var = Some(var);
                }
            }
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("forward pre-activation"));
        }
        let pre_act = z;
        let mut post = if l < k {
            let kind = spec.activation(l);
            let mut out = Matrix::zeros(pre_act.rows(), pre_act.cols());
            for i in 0..pre_act.rows() {
                let row = kind.apply(pre_act.row(i))?;
                out.row_mut(i).copy_from_slice(&row);
            }
            out
        } else {
            pre_act.clone()
        };
        if Some(l) == entry {
            trunk = Some(post.clone());
        } else if connected.contains(&l) {
            let t = trunk
                .as_ref()
                .ok_or(Error::NonFinite("missing trunk state at residual layer"))?;
            post = post.add(t)?;
            trunk = Some(post.clone());
        }
        caches.push(LayerCache {
            pre_act,
            post,
            bn_normalized,
            bn_batch_mean,
            bn_batch_var,
        });
        h = caches.last().expect("just pushed").post.clone();
    }
    Ok(RangeForward { start, stop, caches })
}

/// Backward over the same range. `grad_out` is dL/d(output of layer
/// `stop`); returns parameter gradients and dL/d(input of layer start+1).
pub(crate) fn backward_range(
    spec: &NetworkSpec,
    w: &WeightSet,
    input: &Matrix,
    rf: &RangeForward,
    grad_out: Matrix,
) -> Result<(Gradients, Matrix)> {
    let k = spec.depth();
    let (start, stop) = (rf.start, rf.stop);
    let connected = spec.residual_connected_layers();
    let entry = spec.residual_entry();
    // Skip gradients waiting to be added when the backward sweep reaches the
    // source layer of a residual connection.
    let mut pending: Vec<Option<Matrix>> = vec![None; stop + 1];
    let mut grad_post = grad_out;
    let mut grads_rev: Vec<LayerGrads> = Vec::with_capacity(stop - start);
    for l in (start + 1..=stop).rev() {
        if let Some(p) = pending[l].take() {
            grad_post = grad_post.add(&p)?;
        }
        if connected.contains(&l) && Some(l) != entry {
            // post = sigma(pre) + trunk: route a copy of the gradient to the
            // previous skip-connected layer.
            let idx = connected.iter().position(|&c| c == l).expect("member");
            let prev = connected[idx - 1];
            if prev > start {
                pending[prev] = Some(match pending[prev].take() {
                    Some(p) => p.add(&grad_post)?,
                    None => grad_post.clone(),
                });
            } else {
                // The trunk is the range input itself; fold into the input
                // gradient at the end via pending[start].
                pending[start] = Some(match pending[start].take() {
                    Some(p) => p.add(&grad_post)?,
                    None => grad_post.clone(),
                });
            }
        }
        let cache = &rf.caches[l - start - 1];
        // Through the activation.
        let mut grad_pre = if l < k {
            let kind = spec.activation(l);
            let mut g = Matrix::zeros(grad_post.rows(), grad_post.cols());
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    g[(i, j)] = grad_post[(i, j)] * kind.sigma_prime(cache.pre_act[(i, j)]);
                }
            }
            g
        } else {
            grad_post.clone()
        };
        let lw = w.layer(l);
        let mut gamma_grad = None;
        let mut beta_grad = None;
        if let Some(bn) = &lw.bn {
            let normalized = cache.bn_normalized.as_ref().ok_or(Error::Degenerate(
                "backward through inference-mode batch norm is not supported".into(),
            ))?;
            let var = cache.bn_batch_var.as_ref().expect("train-mode cache");
            let rows = grad_pre.rows();
            let cols = grad_pre.cols();
            let m = rows as f64;
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    dgamma[j] += grad_pre[(i, j)] * normalized[(i, j)];
                    dbeta[j] += grad_pre[(i, j)];
                }
            }
            // dz = gamma/sqrt(var) * (dy - mean(dy) - n * mean(dy*n))
            let mut dz = Matrix::zeros(rows, cols);
            for j in 0..cols {
                let inv_std = 1.0 / var[j].sqrt();
                let mean_dy = dbeta[j] / m;
                let mean_dyn = dgamma[j] / m;
                for i in 0..rows {
                    dz[(i, j)] = bn.gamma[j]
                        * inv_std
                        * (grad_pre[(i, j)] - mean_dy - normalized[(i, j)] * mean_dyn);
                }
            }
            gamma_grad = Some(dgamma);
            beta_grad = Some(dbeta);
            grad_pre = dz;
        }
        // Through the affine map: z = h_prev * W^T + b.
        let h_prev = if l == start + 1 {
            input
        } else {
            &rf.caches[l - start - 2].post
        };
        let dw = grad_pre.transpose().matmul(h_prev)?;
        let dbias = lw.bias.as_ref().map(|_| {
            let mut db = vec![0.0; grad_pre.cols()];
            for i in 0..grad_pre.rows() {
                for (acc, &g) in db.iter_mut().zip(grad_pre.row(i)) {
                    *acc += g;
                }
            }
            db
        });
        grads_rev.push(LayerGrads {
            w: dw,
            bias: dbias,
            gamma: gamma_grad,
            beta: beta_grad,
        });
        grad_post = grad_pre.matmul(&lw.w)?;
    }
    if let Some(p) = pending[start].take() {
        grad_post = grad_post.add(&p)?;
    }
    grads_rev.reverse();
    Ok((
        Gradients {
            first_layer: start + 1,
            layers: grads_rev,
        },
        grad_post,
    ))
}

/// dL/d(logits) for the mean loss over the batch.
pub(crate) fn loss_gradient(
    outputs: &Matrix,
    labels: &[usize],
    kind: LossKind,
) -> Result<Matrix> {
    let n = outputs.rows();
    if labels.len() != n {
        return Err(Error::shape("loss_gradient", "labels vs outputs"));
    }
    let c = outputs.cols();
    let mut g = Matrix::zeros(n, c);
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let row = outputs.row(i);
        match kind {
            LossKind::Mse => {
                for j in 0..c {
                    let t = if j == labels[i] { 1.0 } else { 0.0 };
                    g[(i, j)] = 2.0 * (row[j] - t) * scale;
                }
            }
            LossKind::CrossEntropy => {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&o| (o - max).exp()).sum();
                for j in 0..c {
                    let p = (row[j] - max).exp() / denom;
                    let t = if j == labels[i] { 1.0 } else { 0.0 };
                    g[(i, j)] = (p - t) * scale;
                }
            }
        }
    }
    Ok(g)
}

/// One inference-mode layer on a batch: affine, running-statistics batch
/// norm, and the activation (layers below the output).
pub(crate) fn inference_layer(
    spec: &NetworkSpec,
    w: &WeightSet,
    l: usize,
    h: &Matrix,
) -> Result<Matrix> {
    let lw = w.layer(l);
    let mut z = h.matmul(&lw.w.transpose())?;
    if let Some(b) = &lw.bias {
        add_bias_rows(&mut z, b);
    }
    if let Some(bn) = &lw.bn {
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            for j in 0..row.len() {
                row[j] = bn.gamma[j] * (row[j] - bn.running_mean[j]) / bn.running_var[j].sqrt()
                    + bn.beta[j];
            }
        }
    }
    if l < spec.depth() {
        let kind = spec.activation(l);
        for i in 0..z.rows() {
            let row = kind.apply(z.row(i))?;
            z.row_mut(i).copy_from_slice(&row);
        }
    }
    Ok(z)
}

/// Mean training-mode loss of a batch; the differentiable function whose
/// gradients `backprop_grads` produces.
pub fn batch_loss(
    spec: &NetworkSpec,
    w: &WeightSet,
    inputs: &Matrix,
    labels: &[usize],
    kind: LossKind,
) -> Result<f64> {
    let rf = forward_range(spec, w, inputs, 0, spec.depth(), BnMode::Train)?;
    crate::network::mean_loss(rf.output(), labels, spec.output_dim(), kind)
}

/// Gradients of the mean batch loss with respect to every trainable tensor.
pub fn backprop_grads(
    spec: &NetworkSpec,
    w: &WeightSet,
    inputs: &Matrix,
    labels: &[usize],
    kind: LossKind,
) -> Result<Gradients> {
    let rf = forward_range(spec, w, inputs, 0, spec.depth(), BnMode::Train)?;
    let grad_out = loss_gradient(rf.output(), labels, kind)?;
    let (grads, _) = backward_range(spec, w, inputs, &rf, grad_out)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients"));
    }
    Ok(grads)
}
