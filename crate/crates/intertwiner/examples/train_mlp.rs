//! Deterministic training on a synthetic task: build the dataset, train
//! with Adam and evenly spaced learning-rate halvings, keep the
//! best-validation weights, and save them in the JSON weight format.
//!
//! Run with: cargo run --release --example train_mlp

use intertwiner::intertwiner::ActivationKind;
use intertwiner::network::{init_weights, save_weights, NetworkSpec};
use intertwiner::numerics::Rng;
use intertwiner::trainer::{synth_dataset, train, DataKind, TrainConfig};

fn main() -> intertwiner::Result<()> {
    let spec = NetworkSpec::mlp(vec![4, 24, 24, 3], ActivationKind::Relu)?;
    let mut rng = Rng::new(41);
    let ds = synth_dataset(DataKind::Rings, 4, 3, 3000, &mut rng)?;
    let (train_ds, val_ds) = ds.split_at(2400);

    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 0.01,
        lr_drops: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    let w0 = init_weights(&spec, &mut Rng::new(cfg.seed));
    let (best, history) = train(&spec, &w0, &train_ds, &val_ds, &cfg)?;

    println!("epoch,train_loss,val_acc");
    for e in history.iter().step_by(5) {
        println!("{},{:.4},{:.4}", e.epoch, e.train_loss, e.val_acc);
    }
    let best_acc = history.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    println!("best validation accuracy: {best_acc:.4}");

    let out = std::env::temp_dir().join("itw-example-rings.json");
    save_weights(&out, &spec, &best)?;
    println!("weights saved to {}", out.display());
    Ok(())
}
