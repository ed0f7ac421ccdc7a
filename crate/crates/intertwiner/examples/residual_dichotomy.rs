//! Residual connections narrow the symmetry group: elements acting on
//! skip-connected layers must coincide, otherwise the function breaks.
//! Stitching strictly inside a residual block inherits an uncancelled
//! group factor on the trunk and fails even with the exact element, while
//! the same stitch at the skip connection is exact.
//!
//! Run with: cargo run --release --example residual_dichotomy

use intertwiner::cli::{run_residual_failure, ResidualFailureConfig};
use intertwiner::intertwiner::ActivationKind;
use intertwiner::network::{
    init_weights, residual_failure_demo, GroupAssignment, NetworkSpec, ResidualSpec,
};
use intertwiner::numerics::Rng;

fn main() -> intertwiner::Result<()> {
    let mut rng = Rng::new(5);
    // Two depth-2 blocks joining layers 1 -> 3 -> 5.
    let spec = NetworkSpec::new(
        vec![6, 14, 14, 14, 14, 14, 3],
        vec![ActivationKind::Relu; 5],
        vec![false; 5],
        Some(ResidualSpec {
            layers: vec![3, 5],
            block_depth: 2,
        }),
    )?;
    let w = init_weights(&spec, &mut rng);
    let ga = GroupAssignment::random_unequal_residual(&spec, &mut rng)?;
    let report = residual_failure_demo(&spec, &w, &ga, 500, &mut rng)?;
    println!("random residual mlp, 500 probe inputs:");
    println!(
        "  unequal elements on skip layers: max deviation {:.3e}  (function broken)",
        report.unequal_deviation
    );
    println!(
        "  equalized elements:              max deviation {:.3e}  (function preserved)",
        report.equal_deviation
    );

    // The full experiment additionally trains the network and compares
    // stitching at a skip connection against stitching inside a block,
    // both with the exact group element.
    println!("\ntrained network, exact-element stitches (3 trials):");
    let cfg = ResidualFailureConfig {
        trials: 3,
        n_train: 1500,
        n_val: 500,
        train_epochs: 20,
        ..ResidualFailureConfig::default()
    };
    run_residual_failure(&cfg, |trial, t| {
        if trial < 3 {
            println!(
                "  trial {trial}: at-connection penalty {:+.2} points, in-block penalty {:+.2} points",
                t.connection_penalty, t.in_block_penalty
            );
        }
    })?;
    Ok(())
}
