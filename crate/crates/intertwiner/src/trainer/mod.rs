//! Deterministic single-threaded training of the small networks, synthetic
//! classification tasks, and the rotation-penalty experiment. Every run is
//! a pure function of (spec, initial weights, dataset, config); identical
//! seeds give identical histories bit for bit.

mod backprop;
mod optimizer;

pub use backprop::{backprop_grads, batch_loss, BnMode, Gradients, LayerGrads};
pub(crate) use backprop::{backward_range, forward_range, inference_layer, loss_gradient};
pub use optimizer::{Optimizer, OptimizerKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intertwiner::{random_element, ActivationKind};
use crate::network::{
    accuracy, forward_batch, init_weights, mean_loss, LossKind, NetworkSpec, WeightSet,
};
use crate::numerics::{qr_orthonormalize, Matrix, Rng};

/// Exponential-moving-average factor for batch-norm running statistics.
const BN_MOMENTUM: f64 = 0.1;

/// Default logit margin below which teacher-labeled inputs are redrawn.
/// Keeping samples away from the decision boundary makes the realizable
/// task reliably learnable at desk scale.
pub const DEFAULT_TEACHER_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Train,
    Val,
}

/// A labeled classification dataset, rows = examples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Split off the first `n_train` rows as the training set; the rest is
    /// validation.
    pub fn split_at(&self, n_train: usize) -> (Dataset, Dataset) {
        assert!(n_train <= self.len());
        let d = self.inputs.cols();
        let take = |range: std::ops::Range<usize>, split: Split| {
            let mut m = Matrix::zeros(range.len(), d);
            for (out_i, i) in range.clone().enumerate() {
                m.row_mut(out_i).copy_from_slice(self.inputs.row(i));
            }
            Dataset {
                inputs: m,
                labels: self.labels[range].to_vec(),
                classes: self.classes,
                split,
            }
        };
        (
            take(0..n_train, Split::Train),
            take(n_train..self.len(), Split::Val),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Blobs,
    Rings,
    Teacher,
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DataKind::Blobs),
            "rings" => Ok(DataKind::Rings),
            "teacher" => Ok(DataKind::Teacher),
            other => Err(Error::InvalidSpec(format!("unknown data kind '{other}'"))),
        }
    }
}

/// Deterministic synthetic dataset. Blobs are well-separated Gaussian
/// clusters, rings are concentric annuli (first two coordinates), and
/// teacher labels come from the argmax of a random frozen network, which
/// makes the task realizable by construction.
pub fn synth_dataset(
    kind: DataKind,
    n0: usize,
    classes: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidSpec("need at least 2 classes".into()));
    }
    if n0 == 0 || n == 0 {
        return Err(Error::InvalidSpec("empty dataset dimensions".into()));
    }
    match kind {
        DataKind::Blobs => {
            let mut means = Matrix::zeros(classes, n0);
            if n0 == 1 {
                for c in 0..classes {
                    means[(c, 0)] = 5.0 * (c as f64 - (classes as f64 - 1.0) / 2.0);
                }
            } else {
                let offset = rng.next_f64() * std::f64::consts::TAU;
                for c in 0..classes {
                    let theta = std::f64::consts::TAU * c as f64 / classes as f64 + offset;
                    means[(c, 0)] = 5.0 * theta.cos();
                    means[(c, 1)] = 5.0 * theta.sin();
                }
            }
            let mut inputs = Matrix::zeros(n, n0);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % classes;
                for j in 0..n0 {
                    inputs[(i, j)] = means[(c, j)] + 0.5 * rng.gaussian();
                }
                labels.push(c);
            }
            Ok(Dataset {
                inputs,
                labels,
                classes,
                split: Split::Full,
            })
        }
        DataKind::Rings => {
            if n0 < 2 {
                return Err(Error::InvalidSpec("rings need at least 2 input dims".into()));
            }
            let mut inputs = Matrix::zeros(n, n0);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let c = i % classes;
                let radius = 1.0 + 1.5 * c as f64 + 0.12 * rng.gaussian();
                let theta = rng.next_f64() * std::f64::consts::TAU;
                inputs[(i, 0)] = radius * theta.cos();
                inputs[(i, 1)] = radius * theta.sin();
                for j in 2..n0 {
                    inputs[(i, j)] = 0.1 * rng.gaussian();
                }
                labels.push(c);
            }
            Ok(Dataset {
                inputs,
                labels,
                classes,
                split: Split::Full,
            })
        }
        DataKind::Teacher => {
            let spec = NetworkSpec::mlp(vec![n0, 32, 32, classes], ActivationKind::Relu)?;
            Ok(teacher_dataset(&spec, n, DEFAULT_TEACHER_MARGIN, rng)?.0)
        }
    }
}

/// Dataset labeled by the argmax of a freshly drawn teacher network with the
/// given architecture. Inputs whose top-two logit margin falls below
/// `margin` are redrawn (bounded attempts) so labels are stable; the teacher
/// weights are returned so realizability can be checked directly.
pub fn teacher_dataset(
    spec: &NetworkSpec,
    n: usize,
    margin: f64,
    rng: &mut Rng,
) -> Result<(Dataset, WeightSet)> {
    let classes = spec.output_dim();
    if classes < 2 {
        return Err(Error::InvalidSpec("teacher needs at least 2 outputs".into()));
    }
    let mut teacher = init_weights(spec, rng);
    // A slightly sharpened readout widens argmax margins.
    let k = spec.depth();
    teacher.layer_mut(k).w = teacher.layer(k).w.scale(1.5);
    let n0 = spec.input_dim();
    let mut inputs = Matrix::zeros(n, n0);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut chosen: Option<(Vec<f64>, usize)> = None;
        for _attempt in 0..20 {
            let x = rng.gaussian_vec(n0);
            let out = crate::network::forward(spec, &teacher, &x)?;
            let mut best = 0usize;
            for (c, &v) in out.iter().enumerate() {
                if v > out[best] {
                    best = c;
                }
            }
            let mut second = f64::NEG_INFINITY;
            for (c, &v) in out.iter().enumerate() {
                if c != best && v > second {
                    second = v;
                }
            }
            if out[best] - second >= margin {
                chosen = Some((x, best));
                break;
            }
            if chosen.is_none() {
                chosen = Some((x, best));
            }
        }
        let (x, label) = chosen.expect("at least one draw");
        inputs.row_mut(i).copy_from_slice(&x);
        labels.push(label);
    }
    Ok((
        Dataset {
            inputs,
            labels,
            classes,
            split: Split::Full,
        },
        teacher,
    ))
}

/// Set every batch-norm layer's running statistics to the exact mean and
/// population variance of its pre-normalization activations over a
/// reference batch, processing layers in order so later layers see the
/// refreshed earlier ones. Mirrors what a training run's moving averages
/// converge to.
pub fn calibrate_batchnorm(
    spec: &NetworkSpec,
    w: &mut WeightSet,
    inputs: &Matrix,
) -> Result<()> {
    let k = spec.depth();
    let mut h = inputs.clone();
    for l in 1..=k {
        if l < k && spec.has_batchnorm(l) {
            let z = h.matmul(&w.layer(l).w.transpose())?;
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
                    let d = z[(i, j)] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= rows;
            }
            if var.iter().any(|&v| v <= 0.0) {
                return Err(Error::Degenerate(
                    "zero variance during batch-norm calibration".into(),
                ));
            }
            let bn = w.layer_mut(l).bn.as_mut().expect("bn layer");
            bn.running_mean = mean;
            bn.running_var = var;
        }
        h = backprop::inference_layer(spec, w, l, &h)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of evenly spaced halvings of the learning rate.
    pub lr_drops: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            lr_drops: 4,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidSpec("learning rate must be non-negative".into()));
        }
        if let OptimizerKind::Sgd { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::InvalidSpec("momentum must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for j in 1..=self.lr_drops {
            if epoch > self.epochs * j / (self.lr_drops + 1) {
                lr *= 0.5;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Train with some layers frozen; returns the weights with the best
/// validation accuracy (earliest epoch on ties) and the per-epoch history.
pub fn train_frozen(
    spec: &NetworkSpec,
    w0: &WeightSet,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    frozen: &[bool],
) -> Result<(WeightSet, Vec<EpochStats>)> {
    cfg.validate()?;
    crate::network::validate_weights(spec, w0)?;
    if train_ds.classes != spec.output_dim() {
        return Err(Error::InvalidSpec(format!(
            "dataset has {} classes, network outputs {}",
            train_ds.classes,
            spec.output_dim()
        )));
    }
    let mut w = w0.clone();
    let mut opt = Optimizer::new(cfg.optimizer, spec.depth());
    let mut rng = Rng::new(cfg.seed);
    let n = train_ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, WeightSet)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let mut xb = Matrix::zeros(batch_idx.len(), train_ds.inputs.cols());
            let mut yb = Vec::with_capacity(batch_idx.len());
            for (row, &i) in batch_idx.iter().enumerate() {
                xb.row_mut(row).copy_from_slice(train_ds.inputs.row(i));
                yb.push(train_ds.labels[i]);
            }
            let rf = backprop::forward_range(spec, &w, &xb, 0, spec.depth(), BnMode::Train)?;
            let loss = mean_loss(rf.output(), &yb, spec.output_dim(), LossKind::CrossEntropy)
                .map_err(|_| Error::Diverged {
                    epoch,
                    detail: "non-finite loss".into(),
                })?;
            loss_sum += loss * batch_idx.len() as f64;
            let grad_out = backprop::loss_gradient(rf.output(), &yb, LossKind::CrossEntropy)?;
            let (grads, _) = backprop::backward_range(spec, &w, &xb, &rf, grad_out)?;
            if !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: "non-finite gradient".into(),
                });
            }
            // Fold the batch statistics into the running estimates before
            // the parameters move.
            for l in 1..spec.depth() {
                if let Some((mean, var)) = rf.bn_batch_stats(l) {
                    if !frozen.get(l - 1).copied().unwrap_or(false) {
                        let bn = w.layer_mut(l).bn.as_mut().expect("bn layer");
                        for j in 0..mean.len() {
                            bn.running_mean[j] =
                                (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * mean[j];
                            bn.running_var[j] =
                                (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * var[j];
                        }
                    }
                }
            }
            opt.step(&mut w, &grads, lr, frozen);
        }
        let train_loss = loss_sum / n as f64;
        let val_out = forward_batch(spec, &w, &val_ds.inputs)?;
        let val_acc = accuracy(&val_out, &val_ds.labels);
        history.push(EpochStats {
            epoch,
            train_loss,
            val_acc,
        });
        let better = match &best {
            None => true,
            Some((acc, _, _)) => val_acc > *acc,
        };
        if better {
            best = Some((val_acc, epoch, w.clone()));
        }
    }
    let (_, _, best_w) = best.expect("epochs >= 1");
    Ok((best_w, history))
}

/// Train every layer.
pub fn train(
    spec: &NetworkSpec,
    w0: &WeightSet,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(WeightSet, Vec<EpochStats>)> {
    train_frozen(spec, w0, train_ds, val_ds, cfg, &vec![false; spec.depth()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    GRelu,
    Orthogonal,
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "g_relu" | "grelu" => Ok(TransformKind::GRelu),
            "orthogonal" => Ok(TransformKind::Orthogonal),
            other => Err(Error::InvalidSpec(format!("unknown transform '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RotationPenaltyResult {
    pub baseline_acc: f64,
    pub finetuned_acc: f64,
    /// baseline minus fine-tuned accuracy, in percentage points.
    pub penalty_points: f64,
}

/// Train a baseline, transform the weights and bias of layer `l` in place
/// by a random group element or a random rotation, freeze layers up to and
/// including `l`, fine-tune the rest, and report the accuracy paid.
/// Group-element transforms admit exact recovery (the next layer can absorb
/// φ(A)⁻¹), rotations do not.
pub fn rotation_penalty_experiment(
    spec: &NetworkSpec,
    train_ds: &Dataset,
    val_ds: &Dataset,
    l: usize,
    transform: TransformKind,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<RotationPenaltyResult> {
    let k = spec.depth();
    if !(1..k).contains(&l) {
        return Err(Error::InvalidSpec(format!("layer {l} outside 1..={}", k - 1)));
    }
    if transform == TransformKind::GRelu && spec.activation(l) != ActivationKind::Relu {
        return Err(Error::InvalidSpec(
            "group transform requires a relu layer".into(),
        ));
    }
    let mut init_rng = Rng::new(cfg.seed);
    let w0 = init_weights(spec, &mut init_rng);
    let (w_base, hist) = train(spec, &w0, train_ds, val_ds, cfg)?;
    let baseline_acc = hist.iter().map(|e| e.val_acc).fold(0.0, f64::max);

    let n_l = spec.width(l);
    let a: Matrix = match transform {
        TransformKind::Identity => Matrix::identity(n_l),
        TransformKind::GRelu => random_element(ActivationKind::Relu, n_l, rng)?.to_matrix(),
        TransformKind::Orthogonal => qr_orthonormalize(&rng.gaussian_matrix(n_l, n_l), rng)?,
    };
    let mut w_t = w_base.clone();
    w_t.layer_mut(l).w = a.matmul(&w_base.layer(l).w)?;
    if let Some(b) = &w_base.layer(l).bias {
        w_t.layer_mut(l).bias = Some(a.matvec(b)?);
    }

    let mut frozen = vec![false; k];
    for f in frozen.iter_mut().take(l) {
        *f = true;
    }
    let (_, hist2) = train_frozen(spec, &w_t, train_ds, val_ds, cfg, &frozen)?;
    let finetuned_acc = hist2.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    Ok(RotationPenaltyResult {
        baseline_acc,
        finetuned_acc,
        penalty_points: 100.0 * (baseline_acc - finetuned_acc),
    })
}
