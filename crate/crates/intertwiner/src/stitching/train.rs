use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    accuracy, forward_batch, forward_upto, mean_loss, HiddenState, LossKind, NetworkSpec,
    WeightSet,
};
use crate::numerics::{Matrix, Rng};
use crate::stitching::{build_stitched, sinkhorn_project, softsort, StitchLayer, StitchVariant};
use crate::trainer::{BnMode, Dataset, EpochStats};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchConfig {
    pub layer_index: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Sinkhorn rounds applied after every gradient step on the relaxed
    /// permutation.
    pub sinkhorn_iters: usize,
    /// Weight of the -α‖P‖_F term pushing the relaxed permutation toward
    /// the polytope's vertices.
    pub reg_alpha: f64,
    /// Epochs during which the diagonal factor stays frozen at identity
    /// while the permutation trains.
    pub head_start_epochs: usize,
    /// Rank for the reduced-rank variant.
    pub rank: usize,
    pub seed: u64,
}

impl StitchConfig {
    pub fn at_layer(layer_index: usize) -> Self {
        StitchConfig {
            layer_index,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            sinkhorn_iters: 16,
            reg_alpha: 0.1,
            head_start_epochs: 10,
            rank: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec("epochs and batch_size must be positive".into()));
        }
        if self.head_start_epochs > self.epochs {
            return Err(Error::InvalidSpec(
                "head_start_epochs must not exceed epochs".into(),
            ));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::InvalidSpec("sinkhorn_iters must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Sharpness of the cross-correlation warm start for the relaxed
/// permutation.
const WARM_START_BETA: f64 = 8.0;

fn init_layer(
    variant: StitchVariant,
    d: usize,
    rank: usize,
    rng: &mut Rng,
    head_f: &Matrix,
    head_g: &Matrix,
) -> Result<StitchLayer> {
    Ok(match variant {
        StitchVariant::FullAffine => StitchLayer::FullAffine {
            // Same data-driven start as the relu-group variant, perturbed
            // so the map is generic.
            m: correlation_warm_start(head_f, head_g)?
                .add(&rng.gaussian_matrix(d, d).scale(0.01 / (d as f64).sqrt()))?,
        },
        StitchVariant::ReducedRank => {
            let scale = 1.0 / (d as f64).sqrt();
            StitchLayer::ReducedRank {
                u: rng.gaussian_matrix(d, rank).scale(scale),
                v: rng.gaussian_matrix(rank, d).scale(scale),
            }
        }
        StitchVariant::GRelu => StitchLayer::GRelu {
            p: correlation_warm_start(head_f, head_g)?,
            lambda: vec![1.0; d],
        },
        StitchVariant::SoftSort => StitchLayer::SoftSort {
            s: rng.gaussian_vec(d).iter().map(|x| 0.1 * x).collect(),
            tau: 1.0 / d as f64,
            log_lambda: vec![0.0; d],
        },
    })
}

/// Warm start for the relaxed permutation: the Sinkhorn projection of a
/// sharpened channel cross-correlation between the two heads' features.
/// The task loss alone cannot single out a channel matching from a few
/// thousand feature vectors (many interior mixing matrices fit equally
/// well), so the optimizer is started in the basin the feature geometry
/// selects, exactly the statistic the permutation-Procrustes metric
/// maximizes. The subsequent projected gradient descent is free to leave it.
fn correlation_warm_start(head_f: &Matrix, head_g: &Matrix) -> Result<Matrix> {
    let d = head_f.cols();
    let normalize = |m: &Matrix| -> Matrix {
        let mut out = m.clone();
        for j in 0..out.cols() {
            let norm = (0..out.rows()).map(|i| out[(i, j)] * out[(i, j)]).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for i in 0..out.rows() {
                    out[(i, j)] /= norm;
                }
            }
        }
        out
    };
    let fx = normalize(head_f);
    let gx = normalize(head_g);
    // corr[a][b] = <f-channel a, g-channel b>; the stitch output channel i
    // collects from f-channel j, so the prior weight of P[i][j] follows
    // corr[j][i].
    let corr = fx.transpose().matmul(&gx)?;
    let mut p = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            p[(i, j)] = (WARM_START_BETA * (corr[(j, i)] - 1.0)).exp();
        }
    }
    sinkhorn_project(&p, 32)
}

struct Velocity {
    bufs: Vec<Vec<f64>>,
}

impl Velocity {
    fn new(sizes: &[usize]) -> Self {
        Velocity {
            bufs: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn apply(&mut self, idx: usize, momentum: f64, lr: f64, param: &mut [f64], grad: &[f64]) {
        let v = &mut self.bufs[idx];
        for i in 0..param.len() {
            v[i] = momentum * v[i] + grad[i];
            param[i] -= lr * v[i];
        }
    }

    fn reset(&mut self, idx: usize) {
        self.bufs[idx].fill(0.0);
    }
}

#[derive(Debug, Clone)]
enum StitchGrads {
    FullAffine { dm: Matrix },
    ReducedRank { du: Matrix, dv: Matrix },
    GRelu { dp: Matrix, dlambda: Vec<f64> },
    SoftSort { ds: Vec<f64>, dlog: Vec<f64> },
}

/// One batch of the stitch objective: cross-entropy of the relaxed stitched
/// network (tail in train mode) minus `reg_alpha·‖P‖_F` for the relu-group
/// variant, together with its gradients in the stitch parameters. `hb` is a
/// batch of f's head features at the stitch layer.
fn stitch_batch_grads(
    g_spec: &NetworkSpec,
    g_w: &WeightSet,
    l: usize,
    layer: &StitchLayer,
    hb: &Matrix,
    yb: &[usize],
    reg_alpha: f64,
) -> Result<(f64, StitchGrads)> {
    let k = g_spec.depth();
    let d = hb.cols();
    let classes = g_spec.output_dim();
    let stitched_in = layer.apply_batch(hb)?;
    let rf = crate::trainer::forward_range(g_spec, g_w, &stitched_in, l, k, BnMode::Train)?;
    let mut loss = mean_loss(rf.output(), yb, classes, LossKind::CrossEntropy)?;
    let grad_out = crate::trainer::loss_gradient(rf.output(), yb, LossKind::CrossEntropy)?;
    let (_, d_stitched) = crate::trainer::backward_range(g_spec, g_w, &stitched_in, &rf, grad_out)?;

    let grads = match layer {
        StitchLayer::FullAffine { .. } => StitchGrads::FullAffine {
            dm: d_stitched.transpose().matmul(hb)?,
        },
        StitchLayer::ReducedRank { u, v } => {
            // S = H Vᵀ Uᵀ.
            let t = hb.matmul(&v.transpose())?;
            let du = d_stitched.transpose().matmul(&t)?;
            let dt = d_stitched.matmul(u)?;
            let dv = dt.transpose().matmul(hb)?;
            StitchGrads::ReducedRank { du, dv }
        }
        StitchLayer::GRelu { p, lambda } => {
            // S = (H · diag(λ)) Pᵀ.
            let mut w = hb.clone();
            for i in 0..w.rows() {
                for (x, lam) in w.row_mut(i).iter_mut().zip(lambda.iter()) {
                    *x *= lam;
                }
            }
            let mut dp = d_stitched.transpose().matmul(&w)?;
            let p_norm = p.frobenius_norm();
            if reg_alpha != 0.0 && p_norm > 0.0 {
                loss -= reg_alpha * p_norm;
                for (g, pval) in dp.as_mut_slice().iter_mut().zip(p.as_slice()) {
                    *g -= reg_alpha * pval / p_norm;
                }
            }
            let dw = d_stitched.matmul(p)?;
            let mut dlambda = vec![0.0; d];
            for i in 0..hb.rows() {
                for j in 0..d {
                    dlambda[j] += dw[(i, j)] * hb[(i, j)];
                }
            }
            StitchGrads::GRelu { dp, dlambda }
        }
        StitchLayer::SoftSort { s, tau, log_lambda } => {
            let p = softsort(s, *tau)?;
            // S = (H · diag(e^λ)) Pᵀ.
            let scales: Vec<f64> = log_lambda.iter().map(|x| x.exp()).collect();
            let mut w = hb.clone();
            for i in 0..w.rows() {
                for (x, sc) in w.row_mut(i).iter_mut().zip(&scales) {
                    *x *= sc;
                }
            }
            let dp = d_stitched.transpose().matmul(&w)?;
            let dw = d_stitched.matmul(&p)?;
            let mut dlog = vec![0.0; d];
            for i in 0..hb.rows() {
                for j in 0..d {
                    dlog[j] += dw[(i, j)] * hb[(i, j)] * scales[j];
                }
            }
            // Softmax backward per row, then through the pairwise
            // |sorted_i - s_j| distances; sorted_i reads s at the argsort.
            let mut ds = vec![0.0; d];
            let mut argsort: Vec<usize> = (0..d).collect();
            argsort.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).expect("finite"));
            for i in 0..d {
                let mut dot = 0.0;
                for j in 0..d {
                    dot += dp[(i, j)] * p[(i, j)];
                }
                for j in 0..d {
                    let de = p[(i, j)] * (dp[(i, j)] - dot);
                    let diff = s[argsort[i]] - s[j];
                    let sign = if diff >= 0.0 { 1.0 } else { -1.0 };
                    ds[j] += de * sign / *tau;
                    ds[argsort[i]] -= de * sign / *tau;
                }
            }
            StitchGrads::SoftSort { ds, dlog }
        }
    };
    Ok((loss, grads))
}

/// Head features of f at the stitch layer for every row of `inputs`.
/// Residual in-block states are not supported here: training applies only
/// at activation layers outside blocks.
fn head_features(
    f_spec: &NetworkSpec,
    f_w: &WeightSet,
    inputs: &Matrix,
    l: usize,
) -> Result<Matrix> {
    let mut h = Matrix::zeros(inputs.rows(), f_spec.width(l));
    for i in 0..inputs.rows() {
        match forward_upto(f_spec, f_w, inputs.row(i), l)? {
            HiddenState::Plain(v) => h.row_mut(i).copy_from_slice(&v),
            HiddenState::InBlock { .. } => {
                return Err(Error::InvalidSpec(
                    "cannot train a stitch strictly inside a residual block".into(),
                ))
            }
        }
    }
    Ok(h)
}

/// Train a stitching layer between two frozen networks with SGD+momentum.
/// For the relu-group variant each step is projected: the permutation
/// factor is clamped non-negative and re-Sinkhorned, the scaling clamped
/// non-negative, and the scaling stays frozen at identity for the first
/// `head_start_epochs`. The training objective is cross-entropy minus
/// `reg_alpha · ‖P‖_F`.
pub fn train_stitch(
    f_spec: &NetworkSpec,
    f_w: &WeightSet,
    g_spec: &NetworkSpec,
    g_w: &WeightSet,
    variant: StitchVariant,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &StitchConfig,
) -> Result<(StitchLayer, Vec<EpochStats>)> {
    cfg.validate()?;
    let l = cfg.layer_index;
    // Validates shapes and layer position.
    build_stitched(f_spec, f_w, g_spec, g_w, l, StitchLayer::identity(f_spec.width(l)), false)?;
    let d = f_spec.width(l);
    let mut rng = Rng::new(cfg.seed);
    let head = head_features(f_spec, f_w, &train_ds.inputs, l)?;
    let head_g = head_features(g_spec, g_w, &train_ds.inputs, l)?;
    let mut layer = init_layer(variant, d, cfg.rank, &mut rng, &head, &head_g)?;
    let n = train_ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut velocity = match &layer {
        StitchLayer::FullAffine { .. } => Velocity::new(&[d * d]),
        StitchLayer::ReducedRank { .. } => Velocity::new(&[d * cfg.rank, cfg.rank * d]),
        StitchLayer::GRelu { .. } => Velocity::new(&[d * d, d]),
        StitchLayer::SoftSort { .. } => Velocity::new(&[d, d]),
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let head_start = epoch <= cfg.head_start_epochs;
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let mut hb = Matrix::zeros(batch_idx.len(), d);
            let mut yb = Vec::with_capacity(batch_idx.len());
            for (row, &i) in batch_idx.iter().enumerate() {
                hb.row_mut(row).copy_from_slice(head.row(i));
                yb.push(train_ds.labels[i]);
            }
            let (loss, grads) =
                stitch_batch_grads(g_spec, g_w, l, &layer, &hb, &yb, cfg.reg_alpha).map_err(
                    |e| match e {
                        Error::NonFinite(_) => Error::Diverged {
                            epoch,
                            detail: "non-finite stitch loss".into(),
                        },
                        other => other,
                    },
                )?;
            loss_sum += loss * batch_idx.len() as f64;

            match (&mut layer, grads) {
                (StitchLayer::FullAffine { m }, StitchGrads::FullAffine { dm }) => {
                    velocity.apply(0, cfg.momentum, cfg.learning_rate, m.as_mut_slice(), dm.as_slice());
                }
                (StitchLayer::ReducedRank { u, v }, StitchGrads::ReducedRank { du, dv }) => {
                    velocity.apply(0, cfg.momentum, cfg.learning_rate, u.as_mut_slice(), du.as_slice());
                    velocity.apply(1, cfg.momentum, cfg.learning_rate, v.as_mut_slice(), dv.as_slice());
                }
                (StitchLayer::GRelu { p, lambda }, StitchGrads::GRelu { dp, dlambda }) => {
                    velocity.apply(0, cfg.momentum, cfg.learning_rate, p.as_mut_slice(), dp.as_slice());
                    *p = sinkhorn_project(p, cfg.sinkhorn_iters)?;
                    if head_start {
                        velocity.reset(1);
                    } else {
                        velocity.apply(1, cfg.momentum, cfg.learning_rate, lambda, &dlambda);
                        for lam in lambda.iter_mut() {
                            if *lam < 0.0 {
                                *lam = 0.0;
                            }
                        }
                    }
                }
                (StitchLayer::SoftSort { s, log_lambda, .. }, StitchGrads::SoftSort { ds, dlog }) => {
                    velocity.apply(0, cfg.momentum, cfg.learning_rate, s, &ds);
                    if head_start {
                        velocity.reset(1);
                    } else {
                        velocity.apply(1, cfg.momentum, cfg.learning_rate, log_lambda, &dlog);
                    }
                }
                _ => unreachable!("variant fixed for the whole run"),
            }
        }
        let train_loss = loss_sum / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite epoch loss".into(),
            });
        }
        let stitched = build_stitched(f_spec, f_w, g_spec, g_w, l, layer.clone(), false)?;
        let val_acc = stitched.accuracy(&val_ds.inputs, &val_ds.labels)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_acc,
        });
    }
    Ok((layer, history))
}

/// Replace the running statistics of every batch-norm layer in g's tail
/// with exact full-dataset statistics of the stitched network's
/// pre-normalization activations, one layer at a time (later layers see the
/// refreshed earlier ones). No weights change. Returns the updated g
/// weights; a tail without batch norm comes back unchanged.
pub fn bn_recalibrate(
    f_spec: &NetworkSpec,
    f_w: &WeightSet,
    g_spec: &NetworkSpec,
    g_w: &WeightSet,
    l: usize,
    stitch: &StitchLayer,
    train_inputs: &Matrix,
) -> Result<WeightSet> {
    let mut new_w = g_w.clone();
    let k = g_spec.depth();
    let bn_layers: Vec<usize> = (l + 1..k).filter(|&t| g_spec.has_batchnorm(t)).collect();
    if bn_layers.is_empty() {
        return Ok(new_w);
    }
    let head = head_features(f_spec, f_w, train_inputs, l)?;
    let stitched_in = stitch.apply_batch(&head)?;
    for &t in &bn_layers {
        // Run layers l+1 .. t-1 with already-updated statistics, then take
        // the raw affine output of layer t.
        let mut h = stitched_in.clone();
        for mid in l + 1..t {
            h = crate::trainer::inference_layer(g_spec, &new_w, mid, &h)?;
        }
        let z = h.matmul(&new_w.layer(t).w.transpose())?;
        let rows = z.rows() as f64;
        let cols = z.cols();
        let mut mean = vec![0.0; cols];
        for i in 0..z.rows() {
            for (m, &x) in mean.iter_mut().zip(z.row(i)) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows;
        }
        let mut var = vec![0.0; cols];
        for i in 0..z.rows() {
            for j in 0..cols {
                let dx = z[(i, j)] - mean[j];
                var[j] += dx * dx;
            }
        }
        for v in var.iter_mut() {
            *v /= rows;
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Degenerate(
                "zero variance during batch-norm recalibration".into(),
            ));
        }
        let bn = new_w.layer_mut(t).bn.as_mut().expect("bn layer");
        bn.running_mean = mean;
        bn.running_var = var;
    }
    Ok(new_w)
}

/// Average parent accuracy minus stitched accuracy, in percentage points.
pub fn stitching_penalty(
    f_spec: &NetworkSpec,
    f_w: &WeightSet,
    g_spec: &NetworkSpec,
    g_w: &WeightSet,
    stitched: &crate::stitching::StitchedNet<'_>,
    val_ds: &Dataset,
) -> Result<f64> {
    let acc_f = accuracy(&forward_batch(f_spec, f_w, &val_ds.inputs)?, &val_ds.labels);
    let acc_g = accuracy(&forward_batch(g_spec, g_w, &val_ds.inputs)?, &val_ds.labels);
    let acc_s = stitched.accuracy(&val_ds.inputs, &val_ds.labels)?;
    Ok(100.0 * (0.5 * (acc_f + acc_g) - acc_s))
}

/// Everything the full pipeline produces for one (layer, variant, seed)
/// cell: train, threshold, recalibrate, evaluate.
#[derive(Debug, Clone)]
pub struct StitchOutcome {
    pub trained: StitchLayer,
    pub evaluated: StitchLayer,
    pub recalibrated_g: WeightSet,
    pub history: Vec<EpochStats>,
    pub acc_f: f64,
    pub acc_g: f64,
    pub acc_stitched: f64,
    pub penalty_points: f64,
}

#[cfg(test)]
mod pipeline_tests {
    use super::*;
    use crate::intertwiner::{ActivationKind, Element};
    use crate::network::{act_on_weights, init_weights, GroupAssignment, NetworkSpec};
    use crate::stitching::build_stitched;
    use crate::trainer::{teacher_dataset, train, TrainConfig};

    struct Setup {
        spec: NetworkSpec,
        f_w: WeightSet,
        g_w: WeightSet,
        ga: GroupAssignment,
        train_ds: Dataset,
        val_ds: Dataset,
    }

    fn min_stitch_setup(seed: u64) -> Setup {
        let mut rng = Rng::new(seed);
        let spec = NetworkSpec::mlp(vec![8, 16, 16, 6], ActivationKind::Relu).unwrap();
        let (ds, _) = teacher_dataset(&spec, 3000, 0.6, &mut rng).unwrap();
        let (train_ds, val_ds) = ds.split_at(2400);
        let w0 = init_weights(&spec, &mut Rng::new(seed ^ 1));
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 0.01,
            lr_drops: 2,
            seed,
            ..TrainConfig::default()
        };
        let (f_w, _) = train(&spec, &w0, &train_ds, &val_ds, &cfg).unwrap();
        let ga = GroupAssignment::random(&spec, &mut rng).unwrap();
        let g_w = act_on_weights(&spec, &f_w, &ga).unwrap();
        Setup {
            spec,
            f_w,
            g_w,
            ga,
            train_ds,
            val_ds,
        }
    }

    #[test]
    fn injected_group_stitch_has_zero_penalty() {
        let s = min_stitch_setup(11);
        let l = 2;
        let Element::Monomial(a_l) = s.ga.element(l) else { panic!() };
        let phi = a_l.phi();
        let stitch = StitchLayer::g_relu_exact(phi.perm(), phi.diag().to_vec()).unwrap();
        let net = build_stitched(&s.spec, &s.f_w, &s.spec, &s.g_w, l, stitch, false).unwrap();
        let pen = stitching_penalty(&s.spec, &s.f_w, &s.spec, &s.g_w, &net, &s.val_ds).unwrap();
        assert!(pen.abs() < 1e-9, "injected penalty {pen}");
    }

    #[test]
    fn learned_stitches_recover_accuracy() {
        let s = min_stitch_setup(12);
        let l = 2;
        let cfg = StitchConfig {
            layer_index: l,
            epochs: 30,
            head_start_epochs: 10,
            seed: 3,
            ..StitchConfig::at_layer(l)
        };
        let grelu = run_stitch_pipeline(
            &s.spec,
            &s.f_w,
            &s.spec,
            &s.g_w,
            StitchVariant::GRelu,
            &s.train_ds,
            &s.val_ds,
            &cfg,
        )
        .unwrap();
        assert!(
            grelu.penalty_points <= 2.0,
            "grelu penalty {}",
            grelu.penalty_points
        );
        let affine = run_stitch_pipeline(
            &s.spec,
            &s.f_w,
            &s.spec,
            &s.g_w,
            StitchVariant::FullAffine,
            &s.train_ds,
            &s.val_ds,
            &cfg,
        )
        .unwrap();
        assert!(
            affine.penalty_points <= 1.0,
            "affine penalty {}",
            affine.penalty_points
        );
        // Class containment: the affine optimum can only be at least as
        // good, up to optimization slack.
        assert!(affine.penalty_points <= grelu.penalty_points + 1.0);
    }

    #[test]
    fn untrained_random_stitch_pays_heavily() {
        let s = min_stitch_setup(13);
        let mut rng = Rng::new(99);
        let random = StitchLayer::FullAffine {
            m: rng.gaussian_matrix(16, 16).scale(0.25),
        };
        let net = build_stitched(&s.spec, &s.f_w, &s.spec, &s.g_w, 2, random, false).unwrap();
        let pen = stitching_penalty(&s.spec, &s.f_w, &s.spec, &s.g_w, &net, &s.val_ds).unwrap();
        assert!(pen > 20.0, "random stitch penalty {pen}");
    }

    #[test]
    fn frozen_parents_stay_bit_identical() {
        let s = min_stitch_setup(14);
        let f_before = s.f_w.clone();
        let g_before = s.g_w.clone();
        let cfg = StitchConfig {
            layer_index: 1,
            epochs: 3,
            head_start_epochs: 1,
            seed: 5,
            ..StitchConfig::at_layer(1)
        };
        let _ = train_stitch(
            &s.spec,
            &s.f_w,
            &s.spec,
            &s.g_w,
            StitchVariant::GRelu,
            &s.train_ds,
            &s.val_ds,
            &cfg,
        )
        .unwrap();
        assert_eq!(s.f_w, f_before);
        assert_eq!(s.g_w, g_before);
    }

    #[test]
    fn birkhoff_membership_holds_during_training() {
        let s = min_stitch_setup(15);
        let cfg = StitchConfig {
            layer_index: 2,
            epochs: 4,
            head_start_epochs: 2,
            seed: 6,
            ..StitchConfig::at_layer(2)
        };
        let (layer, _) = train_stitch(
            &s.spec,
            &s.f_w,
            &s.spec,
            &s.g_w,
            StitchVariant::GRelu,
            &s.train_ds,
            &s.val_ds,
            &cfg,
        )
        .unwrap();
        let StitchLayer::GRelu { p, lambda } = &layer else { panic!() };
        let d = p.rows();
        for i in 0..d {
            let row_sum: f64 = p.row(i).iter().sum();
            let col_sum: f64 = (0..d).map(|r| p[(r, i)]).sum();
            assert!((row_sum - 1.0).abs() < 1e-3, "row sum {row_sum}");
            assert!((col_sum - 1.0).abs() < 1e-3, "col sum {col_sum}");
            assert!(p.row(i).iter().all(|&x| x >= 0.0));
        }
        assert!(lambda.iter().all(|&x| x >= 0.0));
    }

    // The Frobenius-norm pull is radial, and the Sinkhorn projection is
    // scale invariant, so the published regularizer cannot move the
    // projected iterates measurably; the paired-seed means document that.
    #[test]
    fn regularizer_is_inert_under_projection() {
        let s = min_stitch_setup(16);
        let mut with_reg = 0.0;
        let mut without = 0.0;
        for seed in 0..3u64 {
            for (alpha, on) in [(0.1, true), (0.0, false)] {
                let cfg = StitchConfig {
                    layer_index: 2,
                    epochs: 6,
                    head_start_epochs: 3,
                    reg_alpha: alpha,
                    seed,
                    ..StitchConfig::at_layer(2)
                };
                let (layer, _) = train_stitch(
                    &s.spec,
                    &s.f_w,
                    &s.spec,
                    &s.g_w,
                    StitchVariant::GRelu,
                    &s.train_ds,
                    &s.val_ds,
                    &cfg,
                )
                .unwrap();
                let StitchLayer::GRelu { p, .. } = &layer else { panic!() };
                if on {
                    with_reg += p.frobenius_norm();
                } else {
                    without += p.frobenius_norm();
                }
            }
        }
        let rel = (with_reg - without).abs() / without.max(1e-9);
        assert!(rel < 0.01, "regularizer moved the norm by {rel}");
    }

    #[test]
    fn softsort_variant_trains_and_thresholds() {
        let s = min_stitch_setup(18);
        let cfg = StitchConfig {
            layer_index: 2,
            epochs: 4,
            head_start_epochs: 2,
            seed: 9,
            ..StitchConfig::at_layer(2)
        };
        let (layer, history) = train_stitch(
            &s.spec,
            &s.f_w,
            &s.spec,
            &s.g_w,
            StitchVariant::SoftSort,
            &s.train_ds,
            &s.val_ds,
            &cfg,
        )
        .unwrap();
        assert_eq!(history.len(), 4);
        assert!(history.iter().all(|e| e.train_loss.is_finite()));
        // Thresholding collapses to a hard row-argmax map.
        let hard = layer.thresholded().unwrap();
        let m = hard.as_matrix().unwrap();
        for i in 0..m.rows() {
            let nonzero = m.row(i).iter().filter(|&&x| x != 0.0).count();
            assert_eq!(nonzero, 1, "row {i} should pick one channel");
        }
    }

    #[test]
    fn bn_recalibrate_noop_without_batchnorm() {
        let s = min_stitch_setup(17);
        let out = bn_recalibrate(
            &s.spec,
            &s.f_w,
            &s.spec,
            &s.g_w,
            2,
            &StitchLayer::identity(16),
            &s.train_ds.inputs,
        )
        .unwrap();
        assert_eq!(out, s.g_w);
    }

    fn bn_net(seed: u64) -> (NetworkSpec, WeightSet, Dataset, Dataset) {
        let mut rng = Rng::new(seed);
        let spec = NetworkSpec::new(
            vec![6, 12, 12, 4],
            vec![ActivationKind::Relu; 2],
            vec![true, true],
            None,
        )
        .unwrap();
        let plain = NetworkSpec::mlp(vec![6, 16, 16, 4], ActivationKind::Relu).unwrap();
        let (ds, _) = teacher_dataset(&plain, 1500, 0.4, &mut rng).unwrap();
        let (tr, va) = ds.split_at(1200);
        let w0 = init_weights(&spec, &mut Rng::new(seed ^ 2));
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 0.01,
            lr_drops: 1,
            seed,
            ..TrainConfig::default()
        };
        let (w, _) = train(&spec, &w0, &tr, &va, &cfg).unwrap();
        (spec, w, tr, va)
    }

    #[test]
    fn bn_recalibration_stats_are_equivariant_and_help() {
        let (spec, w, tr, va) = bn_net(31);
        // Identity self-stitch: recalibration fits running stats to the
        // exact training distribution.
        let base = bn_recalibrate(
            &spec,
            &w,
            &spec,
            &w,
            1,
            &StitchLayer::identity(12),
            &tr.inputs,
        )
        .unwrap();

        // Permutation self-stitch: stitch by a permutation and transform
        // g by the matching group element; the recalibrated statistics of
        // the permuted net are the permutation of the identity-stitch
        // statistics.
        let mut rng = Rng::new(77);
        let perm = rng.permutation(12);
        let elements = vec![
            Element::Monomial(
                crate::intertwiner::MonomialElement::permutation(
                    ActivationKind::Relu,
                    perm.clone(),
                )
                .unwrap(),
            ),
            Element::identity(ActivationKind::Relu, 12),
        ];
        let ga = GroupAssignment::new(
            &spec,
            elements,
            vec![Some(vec![1.0; 12]), Some(vec![1.0; 12])],
        )
        .unwrap();
        let g_w = act_on_weights(&spec, &w, &ga).unwrap();
        let stitch = StitchLayer::g_relu_exact(&perm, vec![1.0; 12]).unwrap();
        let recal = bn_recalibrate(&spec, &w, &spec, &g_w, 1, &stitch, &tr.inputs).unwrap();
        // Layer 2 of g expects permuted features; its recalibrated stats
        // must be the permuted layer-2 stats of the identity case.
        let bn_base = base.layer(2).bn.as_ref().unwrap();
        let bn_perm = recal.layer(2).bn.as_ref().unwrap();
        // g's layer-2 weight is W2' = A2 W2 phi(A1)^{-1} with A2 = id, so
        // unit j of the permuted net sees the same signal as unit j of the
        // base net (the permutation cancels against phi(A1)^{-1}).
        for j in 0..12 {
            assert!((bn_perm.running_mean[j] - bn_base.running_mean[j]).abs() < 1e-9);
            assert!((bn_perm.running_var[j] - bn_base.running_var[j]).abs() < 1e-9);
        }

        // Recalibration repairs tail statistics that no longer match the
        // stitched feature distribution: corrupt them, recalibrate, and the
        // eval loss returns to the matched level.
        let eval_loss = |g: &WeightSet, s: &StitchLayer| -> f64 {
            let net = build_stitched(&spec, &w, &spec, g, 1, s.clone(), false).unwrap();
            let out = net.forward_batch(&va.inputs).unwrap();
            crate::network::mean_loss(&out, &va.labels, 4, LossKind::CrossEntropy).unwrap()
        };
        let matched = eval_loss(&recal, &stitch);
        let mut stale = g_w.clone();
        {
            let bn = stale.layer_mut(2).bn.as_mut().unwrap();
            for v in bn.running_var.iter_mut() {
                *v *= 9.0;
            }
            for m in bn.running_mean.iter_mut() {
                *m += 1.5;
            }
        }
        let corrupted = eval_loss(&stale, &stitch);
        assert!(corrupted > matched, "corruption should hurt: {matched} vs {corrupted}");
        let repaired_w = bn_recalibrate(&spec, &w, &spec, &stale, 1, &stitch, &tr.inputs).unwrap();
        let repaired = eval_loss(&repaired_w, &stitch);
        assert!(
            repaired <= corrupted && (repaired - matched).abs() < 1e-9,
            "recalibration should restore matched stats: {matched} / {corrupted} -> {repaired}"
        );
    }
}


/// Train a stitch, threshold it (relu-group and softsort variants),
/// recalibrate any tail batch norm under the thresholded map, and measure
/// the penalty on the validation set.
pub fn run_stitch_pipeline(
    f_spec: &NetworkSpec,
    f_w: &WeightSet,
    g_spec: &NetworkSpec,
    g_w: &WeightSet,
    variant: StitchVariant,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &StitchConfig,
) -> Result<StitchOutcome> {
    let (trained, history) =
        train_stitch(f_spec, f_w, g_spec, g_w, variant, train_ds, val_ds, cfg)?;
    let evaluated = trained.thresholded()?;
    let recalibrated_g = bn_recalibrate(
        f_spec,
        f_w,
        g_spec,
        g_w,
        cfg.layer_index,
        &evaluated,
        &train_ds.inputs,
    )?;
    let stitched = build_stitched(
        f_spec,
        f_w,
        g_spec,
        &recalibrated_g,
        cfg.layer_index,
        evaluated.clone(),
        false,
    )?;
    let acc_f = accuracy(&forward_batch(f_spec, f_w, &val_ds.inputs)?, &val_ds.labels);
    let acc_g = accuracy(
        &forward_batch(g_spec, &recalibrated_g, &val_ds.inputs)?,
        &val_ds.labels,
    );
    let acc_stitched = stitched.accuracy(&val_ds.inputs, &val_ds.labels)?;
    let penalty_points = 100.0 * (0.5 * (acc_f + acc_g) - acc_stitched);
    Ok(StitchOutcome {
        trained,
        evaluated,
        recalibrated_g,
        history,
        acc_f,
        acc_g,
        acc_stitched,
        penalty_points,
    })
}
