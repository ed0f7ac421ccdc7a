//! The sanity experiment for weight-space symmetries: transform one hidden
//! layer of a trained network, freeze everything up to it, and fine-tune
//! the rest. A relu-group transform is exactly recoverable (the next layer
//! can absorb its inverse), so it costs almost nothing; a random rotation
//! is not, and the penalty stays visible.
//!
//! Run with: cargo run --release --example rotation_penalty

use intertwiner::cli::{run_rotation_penalty, RotationPenaltyConfig};
use intertwiner::trainer::TransformKind;

fn main() -> intertwiner::Result<()> {
    let cfg = RotationPenaltyConfig {
        seeds: vec![1, 2, 3],
        n_train: 2500,
        n_val: 800,
        epochs: 25,
        transforms: vec![
            TransformKind::Identity,
            TransformKind::GRelu,
            TransformKind::Orthogonal,
        ],
        ..RotationPenaltyConfig::default()
    };
    println!("transform,seed,baseline_acc,finetuned_acc,penalty_points");
    let summary = run_rotation_penalty(&cfg, |t, seed, base, fine, pen| {
        println!("{t:?},{seed},{base:.4},{fine:.4},{pen:+.2}");
    })?;
    println!("\nmean penalty per transform:");
    for (t, m) in &summary.mean_penalty {
        println!("  {t:<12} {m:+.2} points");
    }
    Ok(())
}
