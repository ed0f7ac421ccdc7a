use serde::{Deserialize, Serialize};

use crate::network::WeightSet;
use crate::numerics::Matrix;
use crate::trainer::backprop::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct TensorState {
    velocity: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct LayerState {
    w: TensorState,
    bias: TensorState,
    gamma: TensorState,
    beta: TensorState,
}

/// First/second-moment buffers per trainable tensor.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step_count: u64,
    layers: Vec<LayerState>,
}

fn update_slice(kind: OptimizerKind, t: u64, state: &mut TensorState, lr: f64, param: &mut [f64], grad: &[f64]) {
    if state.velocity.len() != param.len() {
        state.velocity = vec![0.0; param.len()];
        state.second = vec![0.0; param.len()];
    }
    match kind {
        OptimizerKind::Sgd { momentum } => {
            for i in 0..param.len() {
                state.velocity[i] = momentum * state.velocity[i] + grad[i];
                param[i] -= lr * state.velocity[i];
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for i in 0..param.len() {
                state.velocity[i] = beta1 * state.velocity[i] + (1.0 - beta1) * grad[i];
                state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * grad[i] * grad[i];
                let m_hat = state.velocity[i] / bc1;
                let v_hat = state.second[i] / bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

fn update_matrix(kind: OptimizerKind, t: u64, state: &mut TensorState, lr: f64, param: &mut Matrix, grad: &Matrix) {
    if state.velocity.len() != param.as_slice().len() {
        state.velocity = vec![0.0; param.as_slice().len()];
        state.second = vec![0.0; param.as_slice().len()];
    }
    let (p, g) = (param.as_mut_slice(), grad.as_slice());
    match kind {
        OptimizerKind::Sgd { momentum } => {
            for i in 0..p.len() {
                state.velocity[i] = momentum * state.velocity[i] + g[i];
                p[i] -= lr * state.velocity[i];
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - beta2.powi(t as i32);
            for i in 0..p.len() {
                state.velocity[i] = beta1 * state.velocity[i] + (1.0 - beta1) * g[i];
                state.second[i] = beta2 * state.second[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = state.velocity[i] / bc1;
                let v_hat = state.second[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_layers: usize) -> Self {
        Optimizer {
            kind,
            step_count: 0,
            layers: vec![LayerState::default(); n_layers],
        }
    }

    /// One update step. `frozen[l-1]` masks layer l out entirely.
    pub fn step(&mut self, w: &mut WeightSet, grads: &Gradients, lr: f64, frozen: &[bool]) {
        self.step_count += 1;
        let t = self.step_count;
        for (offset, g) in grads.layers.iter().enumerate() {
            let l = grads.first_layer + offset;
            if *frozen.get(l - 1).unwrap_or(&false) {
                continue;
            }
            let state = &mut self.layers[l - 1];
            let lw = w.layer_mut(l);
            update_matrix(self.kind, t, &mut state.w, lr, &mut lw.w, &g.w);
            if let (Some(b), Some(gb)) = (&mut lw.bias, &g.bias) {
                update_slice(self.kind, t, &mut state.bias, lr, b, gb);
            }
            if let Some(bn) = &mut lw.bn {
                if let Some(gg) = &g.gamma {
                    update_slice(self.kind, t, &mut state.gamma, lr, &mut bn.gamma, gg);
                }
                if let Some(gb) = &g.beta {
                    update_slice(self.kind, t, &mut state.beta, lr, &mut bn.beta, gb);
                }
            }
        }
    }
}
