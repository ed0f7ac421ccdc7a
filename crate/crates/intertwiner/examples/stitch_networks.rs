//! Stitching a group-transformed copy of a trained network back onto the
//! original: the exact post-activation element achieves zero penalty by
//! construction, a learned unconstrained linear layer matches it, and the
//! relu-group layer (doubly stochastic relaxation, Sinkhorn projection,
//! Hungarian thresholding) lands within a couple of accuracy points.
//!
//! Run with: cargo run --release --example stitch_networks

use intertwiner::intertwiner::{ActivationKind, Element};
use intertwiner::network::{act_on_weights, init_weights, GroupAssignment, NetworkSpec};
use intertwiner::numerics::Rng;
use intertwiner::stitching::{
    build_stitched, run_stitch_pipeline, stitching_penalty, StitchConfig, StitchLayer,
    StitchVariant,
};
use intertwiner::trainer::{teacher_dataset, train, TrainConfig};

fn main() -> intertwiner::Result<()> {
    let mut rng = Rng::new(300);
    let spec = NetworkSpec::mlp(vec![8, 24, 24, 6], ActivationKind::Relu)?;
    let (ds, _) = teacher_dataset(&spec, 4000, 0.6, &mut rng)?;
    let (train_ds, val_ds) = ds.split_at(3200);

    let cfg = TrainConfig {
        epochs: 40,
        learning_rate: 0.01,
        lr_drops: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let w0 = init_weights(&spec, &mut Rng::new(1));
    let (f_w, hist) = train(&spec, &w0, &train_ds, &val_ds, &cfg)?;
    let base = hist.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    println!("trained f: best val acc {base:.4}");

    let ga = GroupAssignment::random(&spec, &mut rng)?;
    let g_w = act_on_weights(&spec, &f_w, &ga)?;
    let layer = 2;

    // Constructive direction: inject the exact element.
    let Element::Monomial(a) = ga.element(layer) else { unreachable!("relu is monomial") };
    let phi = a.phi();
    let injected = StitchLayer::g_relu_exact(phi.perm(), phi.diag().to_vec())?;
    let net = build_stitched(&spec, &f_w, &spec, &g_w, layer, injected, false)?;
    let pen = stitching_penalty(&spec, &f_w, &spec, &g_w, &net, &val_ds)?;
    println!("injected exact element: penalty {pen:+.2} points");

    // Learned stitches.
    let scfg = StitchConfig {
        layer_index: layer,
        epochs: 40,
        head_start_epochs: 10,
        seed: 2,
        ..StitchConfig::at_layer(layer)
    };
    for variant in [StitchVariant::FullAffine, StitchVariant::GRelu, StitchVariant::ReducedRank] {
        let out = run_stitch_pipeline(
            &spec, &f_w, &spec, &g_w, variant, &train_ds, &val_ds, &scfg,
        )?;
        println!(
            "learned {variant:?}: penalty {:+.2} points (stitched acc {:.4})",
            out.penalty_points, out.acc_stitched
        );
    }
    Ok(())
}
