//! Feedforward networks and the symmetry-group action on their weights.
//!
//! Supports per-layer activation kinds, pre-activation batch norm
//! (inference uses stored running statistics), and residual skip
//! connections with a fixed block depth. `act_on_weights` carries a
//! `GroupAssignment` through the weight tuple so the realized function is
//! unchanged; the verifiers measure exactly that, plus the hidden-state
//! transport at each layer.

mod action;
mod forward;
mod io;
mod loss;
mod spec;

pub use action::{
    act_on_weights, act_on_weights_unchecked, loss_invariance_check, residual_failure_demo,
    verify_function_equal, verify_hidden_transport, GroupAssignment, ResidualFailureReport,
};
pub use forward::{forward, forward_batch, forward_from, forward_upto, HiddenState};
pub use io::{load_weights, save_weights, weights_to_json, WEIGHT_FORMAT_VERSION};
pub use loss::{accuracy, mean_loss, LossKind};
pub use spec::{
    init_weights, validate_weights, BatchNormParams, LayerWeights, NetworkSpec, ResidualSpec,
    WeightSet,
};
