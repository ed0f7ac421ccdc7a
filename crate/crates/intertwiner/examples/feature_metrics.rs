//! Representation similarity up to the relu group's symmetries: the four
//! metrics on pairs that are exactly group-related, orthogonally related,
//! and independent, in both flat and channelwise (N, C, H, W) form.
//!
//! Run with: cargo run --release --example feature_metrics

use intertwiner::intertwiner::{random_element, ActivationKind};
use intertwiner::metrics::{
    channel_center_normalize, channel_max_kernel, g_relu_cka, g_relu_cka_4d, g_relu_procrustes,
    g_relu_procrustes_4d, linear_cka, orthogonal_procrustes, FeatureTensor4,
};
use intertwiner::numerics::{qr_orthonormalize, Matrix, Rng};

fn report(label: &str, x: &Matrix, y: &Matrix) -> intertwiner::Result<()> {
    println!(
        "  {label:<22} grelu-procrustes {:.4}  orth-procrustes {:.4}  grelu-cka {:.4}  linear-cka {:.4}",
        g_relu_procrustes(x, y)?,
        orthogonal_procrustes(x, y)?,
        g_relu_cka(x, y)?,
        linear_cka(x, y)?,
    );
    Ok(())
}

fn main() -> intertwiner::Result<()> {
    let mut rng = Rng::new(99);
    let (n, d) = (300, 12);
    let x = rng.gaussian_matrix(n, d);

    // Group transform: permutation and positive per-channel scaling, plus a
    // translation (the CKA metrics center; procrustes compares raw columns).
    let a = random_element(ActivationKind::Relu, d, &mut rng)?.to_matrix();
    let group_related = x.matmul(&a)?;

    let q = qr_orthonormalize(&rng.gaussian_matrix(d, d), &mut rng)?;
    let rotated = x.matmul(&q)?;

    let independent = rng.gaussian_matrix(n, d);

    println!("N = {n}, d = {d}:");
    report("group-related pair", &x, &group_related)?;
    report("orthogonally related", &x, &rotated)?;
    report("independent pair", &x, &independent)?;

    // Channelwise tensors: only channels may be permuted and scaled, never
    // spatial positions.
    let (tn, c, h, w) = (60, 6, 3, 3);
    let t = FeatureTensor4::from_vec(tn, c, h, w, rng.gaussian_vec(tn * c * h * w))?;
    let perm = rng.permutation(c);
    let mut t_moved = t.permute_channels(&perm)?;
    let scales: Vec<f64> = (0..c).map(|_| 0.5 + rng.next_f64()).collect();
    for i in 0..tn {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    t_moved.set(i, ch, y, xx, t_moved.get(i, ch, y, xx) * scales[ch]);
                }
            }
        }
    }
    println!("\nchannel tensors ({tn}x{c}x{h}x{w}), permuted + scaled channels:");
    println!(
        "  grelu-procrustes {:.6}   grelu-cka {:.6}",
        g_relu_procrustes_4d(&t, &t_moved)?,
        g_relu_cka_4d(&t, &t_moved)?
    );
    let kernel = channel_max_kernel(&channel_center_normalize(&t)?);
    println!("  channel max-kernel is {}x{}", kernel.rows(), kernel.cols());
    Ok(())
}
