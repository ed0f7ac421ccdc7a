use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intertwiner::ActivationKind;
use crate::numerics::{Matrix, Rng};

/// Residual skip connections joining layer `layers[0] - block_depth` to
/// `layers[0]`, `layers[0]` to `layers[1]`, and so on. Layer indices are
/// 1-based; every block has the same depth and all joined layers share one
/// width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpec {
    pub layers: Vec<usize>,
    pub block_depth: usize,
}

/// Architecture description: layer widths `n_0..n_k`, one activation and
/// batch-norm flag per hidden layer, optional residual structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    dims: Vec<usize>,
    #[serde(rename = "activation")]
    activations: Vec<ActivationKind>,
    batchnorm: Vec<bool>,
    residual: Option<ResidualSpec>,
}

impl NetworkSpec {
    pub fn new(
        dims: Vec<usize>,
        activations: Vec<ActivationKind>,
        batchnorm: Vec<bool>,
        residual: Option<ResidualSpec>,
    ) -> Result<Self> {
        let spec = NetworkSpec {
            dims,
            activations,
            batchnorm,
            residual,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Plain MLP: one activation kind everywhere, no batch norm.
    pub fn mlp(dims: Vec<usize>, kind: ActivationKind) -> Result<Self> {
        let hidden = dims.len().saturating_sub(2);
        NetworkSpec::new(dims, vec![kind; hidden], vec![false; hidden], None)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::InvalidSpec(msg));
        if self.dims.len() < 2 {
            return err("need at least one layer (dims length >= 2)".into());
        }
        if self.dims.iter().any(|&d| d == 0) {
            return err("zero-width layer".into());
        }
        let k = self.depth();
        if self.activations.len() != k - 1 {
            return err(format!(
                "expected {} activations for depth {k}, got {}",
                k - 1,
                self.activations.len()
            ));
        }
        if self.batchnorm.len() != k - 1 {
            return err(format!(
                "expected {} batchnorm flags, got {}",
                k - 1,
                self.batchnorm.len()
            ));
        }
        for kind in &self.activations {
            kind.validate()?;
        }
        if let Some(res) = &self.residual {
            if res.block_depth == 0 || res.layers.is_empty() {
                return err("residual spec needs block_depth >= 1 and at least one layer".into());
            }
            let b = res.block_depth;
            let r1 = res.layers[0];
            if r1 <= b {
                return err(format!(
                    "first residual layer {r1} leaves no trunk layer before the block"
                ));
            }
            let mut prev = r1;
            for (idx, &r) in res.layers.iter().enumerate() {
                if !(2..=k - 1).contains(&r) {
                    return err(format!("residual layer {r} outside 2..={}", k - 1));
                }
                if idx > 0 {
                    if r <= prev {
                        return err("residual layers must be strictly increasing".into());
                    }
                    if r - prev != b {
                        return err(format!(
                            "residual layers must be spaced by block_depth {b}: {prev} -> {r}"
                        ));
                    }
                    prev = r;
                }
            }
            let entry = r1 - b;
            let width = self.dims[entry];
            for &r in res.layers.iter() {
                if self.dims[r] != width {
                    return err(format!(
                        "residual-connected layers must share width {width}, layer {r} has {}",
                        self.dims[r]
                    ));
                }
            }
            for (i, kind) in self.activations.iter().enumerate() {
                match kind {
                    ActivationKind::Relu | ActivationKind::LeakyRelu { .. } => {}
                    other => {
                        return err(format!(
                            "residual networks support relu-family activations only; \
                             layer {} has {}",
                            i + 1,
                            other.label()
                        ))
                    }
                }
            }
            if self.batchnorm.iter().any(|&b| b) {
                return err("batch norm and residual connections are mutually exclusive".into());
            }
        }
        Ok(())
    }

    /// Number of affine layers k.
    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    /// Width of layer `l` (1-based, 0 = input).
    pub fn width(&self, l: usize) -> usize {
        self.dims[l]
    }

    /// Activation of hidden layer `l` in 1..=k-1.
    pub fn activation(&self, l: usize) -> ActivationKind {
        self.activations[l - 1]
    }

    pub fn has_batchnorm(&self, l: usize) -> bool {
        self.batchnorm[l - 1]
    }

    pub fn any_batchnorm(&self) -> bool {
        self.batchnorm.iter().any(|&b| b)
    }

    pub fn residual(&self) -> Option<&ResidualSpec> {
        self.residual.as_ref()
    }

    /// The layer feeding the first skip (r_1 - block_depth).
    pub fn residual_entry(&self) -> Option<usize> {
        self.residual
            .as_ref()
            .map(|r| r.layers[0] - r.block_depth)
    }

    /// All layers tied together by skips: the entry layer plus each block end.
    pub fn residual_connected_layers(&self) -> Vec<usize> {
        match &self.residual {
            None => vec![],
            Some(r) => {
                let mut v = vec![r.layers[0] - r.block_depth];
                v.extend_from_slice(&r.layers);
                v
            }
        }
    }

    /// Whether hidden layer `m` sits strictly inside a residual block.
    pub fn is_inside_block(&self, m: usize) -> bool {
        match &self.residual {
            None => false,
            Some(r) => {
                let entry = r.layers[0] - r.block_depth;
                let last = *r.layers.last().expect("nonempty");
                m > entry && m < last && !r.layers.contains(&m)
            }
        }
    }
}

/// Batch-norm parameters and running statistics for one hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// One affine layer: weight matrix, bias (absent on batch-norm layers,
/// where it would be redundant), and optional batch-norm block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w: Matrix,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BatchNormParams>,
}

/// The full weight tuple of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub layers: Vec<LayerWeights>,
}

impl WeightSet {
    /// Layer weights at 1-based index `l`.
    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l - 1]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut LayerWeights {
        &mut self.layers[l - 1]
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|lw| {
            lw.w.is_finite()
                && lw.bias.iter().flatten().all(|x| x.is_finite())
                && lw.bn.as_ref().map_or(true, |bn| {
                    bn.gamma.iter().all(|x| x.is_finite())
                        && bn.beta.iter().all(|x| x.is_finite())
                        && bn.running_mean.iter().all(|x| x.is_finite())
                        && bn.running_var.iter().all(|x| x.is_finite())
                })
        })
    }
}

/// Check every shape and flag of `w` against `spec`.
pub fn validate_weights(spec: &NetworkSpec, w: &WeightSet) -> Result<()> {
    let k = spec.depth();
    if w.layers.len() != k {
        return Err(Error::InvalidSpec(format!(
            "expected {k} weight layers, got {}",
            w.layers.len()
        )));
    }
    for l in 1..=k {
        let lw = w.layer(l);
        let (rows, cols) = (spec.width(l), spec.width(l - 1));
        if lw.w.rows() != rows || lw.w.cols() != cols {
            return Err(Error::InvalidSpec(format!(
                "layer {l}: weight is {}x{}, expected {rows}x{cols}",
                lw.w.rows(),
                lw.w.cols()
            )));
        }
        let has_bn = l < k && spec.has_batchnorm(l);
        if has_bn {
            if lw.bias.is_some() {
                return Err(Error::InvalidSpec(format!(
                    "layer {l}: batch-norm layers carry no bias"
                )));
            }
            let bn = lw.bn.as_ref().ok_or_else(|| {
                Error::InvalidSpec(format!("layer {l}: missing batch-norm parameters"))
            })?;
            for (name, v) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("mean", &bn.running_mean),
                ("var", &bn.running_var),
            ] {
                if v.len() != rows {
                    return Err(Error::InvalidSpec(format!(
                        "layer {l}: bn {name} has length {}, expected {rows}",
                        v.len()
                    )));
                }
            }
            if bn.running_var.iter().any(|&v| v <= 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "layer {l}: running variances must be positive"
                )));
            }
        } else {
            if lw.bn.is_some() {
                return Err(Error::InvalidSpec(format!(
                    "layer {l}: unexpected batch-norm parameters"
                )));
            }
            match &lw.bias {
                Some(b) if b.len() == rows => {}
                Some(b) => {
                    return Err(Error::InvalidSpec(format!(
                        "layer {l}: bias has length {}, expected {rows}",
                        b.len()
                    )));
                }
                None => {
                    return Err(Error::InvalidSpec(format!("layer {l}: missing bias")));
                }
            }
        }
    }
    Ok(())
}

/// Gaussian initialization: fan-in scaled weights, zero biases, unit
/// batch-norm parameters.
pub fn init_weights(spec: &NetworkSpec, rng: &mut Rng) -> WeightSet {
    let k = spec.depth();
    let mut layers = Vec::with_capacity(k);
    for l in 1..=k {
        let (rows, cols) = (spec.width(l), spec.width(l - 1));
        let gain = if l < k {
            match spec.activation(l) {
                ActivationKind::Relu | ActivationKind::LeakyRelu { .. } => 2.0,
                _ => 1.0,
            }
        } else {
            1.0
        };
        let scale = (gain / cols as f64).sqrt();
        let w = rng.gaussian_matrix(rows, cols).scale(scale);
        let has_bn = l < k && spec.has_batchnorm(l);
        layers.push(LayerWeights {
            w,
            bias: if has_bn { None } else { Some(vec![0.0; rows]) },
            bn: if has_bn {
                Some(BatchNormParams {
                    gamma: vec![1.0; rows],
                    beta: vec![0.0; rows],
                    running_mean: vec![0.0; rows],
                    running_var: vec![1.0; rows],
                })
            } else {
                None
            },
        });
    }
    WeightSet { layers }
}
