//! The group action on network weights: transform a network (with and
//! without batch norm) by random per-layer elements and verify that the
//! realized function is untouched while every hidden representation moves
//! by the layer's transport matrix.
//!
//! Run with: cargo run --release --example weight_symmetries

use intertwiner::intertwiner::ActivationKind;
use intertwiner::network::{
    act_on_weights, init_weights, loss_invariance_check, verify_function_equal,
    verify_hidden_transport, GroupAssignment, LossKind, NetworkSpec,
};
use intertwiner::numerics::Rng;

fn main() -> intertwiner::Result<()> {
    let mut rng = Rng::new(7);

    for (label, spec) in [
        (
            "relu mlp 5-24-24-24-3",
            NetworkSpec::mlp(vec![5, 24, 24, 24, 3], ActivationKind::Relu)?,
        ),
        (
            "mixed activations",
            NetworkSpec::new(
                vec![5, 16, 16, 3],
                vec![ActivationKind::Relu, ActivationKind::Rbf],
                vec![false, false],
                None,
            )?,
        ),
        (
            "batch-norm relu net",
            NetworkSpec::new(
                vec![5, 20, 20, 3],
                vec![ActivationKind::Relu, ActivationKind::Relu],
                vec![true, true],
                None,
            )?,
        ),
    ] {
        let mut w = init_weights(&spec, &mut rng);
        // Nontrivial stored statistics so inference-mode batch norm matters.
        for lw in w.layers.iter_mut() {
            if let Some(bn) = &mut lw.bn {
                for x in bn.running_mean.iter_mut() {
                    *x = 0.3 * rng.gaussian();
                }
                for x in bn.running_var.iter_mut() {
                    *x = 0.5 + rng.next_f64();
                }
            }
        }
        let ga = GroupAssignment::random(&spec, &mut rng)?;
        let w2 = act_on_weights(&spec, &w, &ga)?;
        let dev = verify_function_equal(&spec, &w, &w2, 2000, &mut rng)?;
        println!("{label}");
        println!("  max |f(x, W') - f(x, W)| over 2000 inputs: {dev:.2e}");
        for m in 1..spec.depth() {
            let t = verify_hidden_transport(&spec, &w, &ga, m, 500, &mut rng)?;
            println!("  hidden transport residual at layer {m}: {t:.2e}");
        }
        let inputs = rng.gaussian_matrix(256, spec.input_dim());
        let labels: Vec<usize> = (0..256).map(|_| rng.next_below(spec.output_dim())).collect();
        for loss in [LossKind::Mse, LossKind::CrossEntropy] {
            let (l1, l2) = loss_invariance_check(&spec, &w, &ga, &inputs, &labels, loss)?;
            println!("  {loss:?} loss: {l1:.6} vs {l2:.6} (|delta| {:.2e})", (l1 - l2).abs());
        }
    }
    Ok(())
}
