use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cli::commands::dataset_for;
use crate::cli::{resolve_out, write_manifest, Flags};
use crate::error::{Error, Result};
use crate::intertwiner::{ActivationKind, Element};
use crate::metrics::{write_features_with_meta, FeatureData, FeatureMeta};
use crate::network::{
    act_on_weights, forward_upto, init_weights, load_weights, residual_failure_demo,
    GroupAssignment, HiddenState, NetworkSpec, ResidualSpec, WeightSet,
};
use crate::numerics::{Matrix, Rng};
use crate::stitching::{
    build_stitched, run_stitch_pipeline, stitching_penalty, StitchConfig, StitchLayer,
    StitchVariant,
};
use crate::trainer::{
    rotation_penalty_experiment, teacher_dataset, train, DataKind, TrainConfig, TransformKind,
};

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, String)> {
    let text = std::fs::read_to_string(path)?;
    let cfg = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok((cfg, text))
}

/// `itw experiment`: the named desk-scale experiments, each reproducible
/// from its JSON config.
pub(crate) fn cmd_experiment(flags: &Flags, command: &str) -> Result<()> {
    let name = flags.require("name")?.to_string();
    let config_path = Path::new(flags.require("config")?).to_path_buf();
    let out_dir = resolve_out(flags.require("out")?);
    std::fs::create_dir_all(&out_dir)?;
    match name.as_str() {
        "min-stitch" => min_stitch(&config_path, &out_dir, command),
        "rotation-penalty" => rotation_penalty(&config_path, &out_dir, command),
        "residual-failure" => residual_failure(&config_path, &out_dir, command),
        "metric-grid" => metric_grid(&config_path, &out_dir, command),
        other => Err(Error::InvalidSpec(format!(
            "unknown experiment '{other}' (min-stitch, rotation-penalty, residual-failure, metric-grid)"
        ))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MinStitchConfig {
    pub seeds: Vec<u64>,
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub teacher_margin: f64,
    pub layer: usize,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_lr_drops: usize,
    pub stitch_epochs: usize,
    pub stitch_lr: f64,
    pub stitch_head_start: usize,
}

impl Default for MinStitchConfig {
    fn default() -> Self {
        MinStitchConfig {
            seeds: default_seeds(),
            input_dim: 16,
            width: 32,
            depth: 4,
            classes: 10,
            n_train: 8000,
            n_val: 2000,
            teacher_margin: 0.8,
            layer: 2,
            train_epochs: 50,
            train_lr: 0.01,
            train_lr_drops: 2,
            stitch_epochs: 100,
            stitch_lr: 1e-3,
            stitch_head_start: 10,
        }
    }
}

impl MinStitchConfig {
    fn spec(&self) -> Result<NetworkSpec> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat(self.width).take(self.depth - 1));
        dims.push(self.classes);
        NetworkSpec::mlp(dims, ActivationKind::Relu)
    }
}

/// One seed of the constructive-plus-learned stitching comparison; shared
/// with the acceptance suite.
pub struct MinStitchCell {
    pub injected_penalty: f64,
    pub affine_penalty: f64,
    pub grelu_penalty: f64,
    pub base_acc: f64,
}

pub fn run_min_stitch_cell(cfg: &MinStitchConfig, seed: u64) -> Result<MinStitchCell> {
    let spec = cfg.spec()?;
    let mut rng = Rng::new(seed).substream(0x5717);
    let total = cfg.n_train + cfg.n_val;
    let (ds, _) = teacher_dataset(&spec, total, cfg.teacher_margin, &mut rng)?;
    let (train_ds, val_ds) = ds.split_at(cfg.n_train);
    let w0 = init_weights(&spec, &mut Rng::new(seed ^ 0xA5));
    let tcfg = TrainConfig {
        epochs: cfg.train_epochs,
        learning_rate: cfg.train_lr,
        lr_drops: cfg.train_lr_drops,
        seed,
        ..TrainConfig::default()
    };
    let (f_w, hist) = train(&spec, &w0, &train_ds, &val_ds, &tcfg)?;
    let base_acc = hist.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    let ga = GroupAssignment::random(&spec, &mut rng)?;
    let g_w = act_on_weights(&spec, &f_w, &ga)?;
    let l = cfg.layer;

    // Constructive direction: inject the exact post-activation element.
    let Element::Monomial(a_l) = ga.element(l) else {
        return Err(Error::Constraint("relu assignments are monomial".into()));
    };
    let phi = a_l.phi();
    let injected = StitchLayer::g_relu_exact(phi.perm(), phi.diag().to_vec())?;
    let injected_net = build_stitched(&spec, &f_w, &spec, &g_w, l, injected, false)?;
    let injected_penalty = stitching_penalty(&spec, &f_w, &spec, &g_w, &injected_net, &val_ds)?;

    let scfg = StitchConfig {
        layer_index: l,
        epochs: cfg.stitch_epochs,
        learning_rate: cfg.stitch_lr,
        head_start_epochs: cfg.stitch_head_start,
        seed,
        ..StitchConfig::at_layer(l)
    };
    let affine = run_stitch_pipeline(
        &spec,
        &f_w,
        &spec,
        &g_w,
        StitchVariant::FullAffine,
        &train_ds,
        &val_ds,
        &scfg,
    )?;
    let grelu = run_stitch_pipeline(
        &spec,
        &f_w,
        &spec,
        &g_w,
        StitchVariant::GRelu,
        &train_ds,
        &val_ds,
        &scfg,
    )?;
    Ok(MinStitchCell {
        injected_penalty,
        affine_penalty: affine.penalty_points,
        grelu_penalty: grelu.penalty_points,
        base_acc,
    })
}

fn min_stitch(config_path: &Path, out_dir: &Path, command: &str) -> Result<()> {
    let started = Instant::now();
    let (cfg, raw): (MinStitchConfig, String) = load_config(config_path)?;
    let seeds = cfg.seeds.clone();
    let mut csv = String::from("seed,base_acc,injected_penalty,affine_penalty,grelu_penalty\n");
    let mut sums = (0.0, 0.0, 0.0);
    for &seed in &seeds {
        let cell = run_min_stitch_cell(&cfg, seed)?;
        csv.push_str(&format!(
            "{seed},{},{},{},{}\n",
            cell.base_acc, cell.injected_penalty, cell.affine_penalty, cell.grelu_penalty
        ));
        sums.0 += cell.injected_penalty;
        sums.1 += cell.affine_penalty;
        sums.2 += cell.grelu_penalty;
        println!(
            "seed {seed}: base {:.3}, injected {:.2}, affine {:.2}, grelu {:.2}",
            cell.base_acc, cell.injected_penalty, cell.affine_penalty, cell.grelu_penalty
        );
    }
    let n = seeds.len() as f64;
    let summary = serde_json::json!({
        "mean_injected_penalty": sums.0 / n,
        "mean_affine_penalty": sums.1 / n,
        "mean_grelu_penalty": sums.2 / n,
    });
    std::fs::write(out_dir.join("results.csv"), csv)?;
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    write_manifest(
        out_dir,
        command,
        &raw,
        seeds,
        vec!["results.csv".into(), "summary.json".into()],
        started,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RotationPenaltyConfig {
    pub seeds: Vec<u64>,
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub teacher_margin: f64,
    pub layer: usize,
    pub transforms: Vec<TransformKind>,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drops: usize,
}

impl Default for RotationPenaltyConfig {
    fn default() -> Self {
        RotationPenaltyConfig {
            seeds: default_seeds(),
            input_dim: 12,
            width: 32,
            depth: 3,
            classes: 6,
            n_train: 4000,
            n_val: 1000,
            teacher_margin: 0.6,
            layer: 1,
            transforms: vec![TransformKind::GRelu, TransformKind::Orthogonal],
            epochs: 40,
            lr: 0.01,
            lr_drops: 2,
        }
    }
}

/// Shared with the acceptance suite: per-transform mean penalties.
pub struct RotationPenaltySummary {
    pub mean_penalty: std::collections::BTreeMap<String, f64>,
}

pub fn run_rotation_penalty(
    cfg: &RotationPenaltyConfig,
    mut row: impl FnMut(TransformKind, u64, f64, f64, f64),
) -> Result<RotationPenaltySummary> {
    let mut dims = vec![cfg.input_dim];
    dims.extend(std::iter::repeat(cfg.width).take(cfg.depth - 1));
    dims.push(cfg.classes);
    let spec = NetworkSpec::mlp(dims, ActivationKind::Relu)?;
    let mut means = std::collections::BTreeMap::new();
    for &transform in &cfg.transforms {
        let mut total = 0.0;
        for &seed in &cfg.seeds {
            let mut rng = Rng::new(seed).substream(0x9071);
            let total_n = cfg.n_train + cfg.n_val;
            let (ds, _) = teacher_dataset(&spec, total_n, cfg.teacher_margin, &mut rng)?;
            let (train_ds, val_ds) = ds.split_at(cfg.n_train);
            let tcfg = TrainConfig {
                epochs: cfg.epochs,
                learning_rate: cfg.lr,
                lr_drops: cfg.lr_drops,
                seed,
                ..TrainConfig::default()
            };
            let result = rotation_penalty_experiment(
                &spec, &train_ds, &val_ds, cfg.layer, transform, &tcfg, &mut rng,
            )?;
            row(
                transform,
                seed,
                result.baseline_acc,
                result.finetuned_acc,
                result.penalty_points,
            );
            total += result.penalty_points;
        }
        means.insert(
            format!("{transform:?}").to_lowercase(),
            total / cfg.seeds.len() as f64,
        );
    }
    Ok(RotationPenaltySummary { mean_penalty: means })
}

fn rotation_penalty(config_path: &Path, out_dir: &Path, command: &str) -> Result<()> {
    let started = Instant::now();
    let (cfg, raw): (RotationPenaltyConfig, String) = load_config(config_path)?;
    let seeds = cfg.seeds.clone();
    let mut csv = String::from("transform,seed,baseline_acc,finetuned_acc,penalty\n");
    let summary = run_rotation_penalty(
        &cfg,
        |transform, seed, base, fine, pen| {
            csv.push_str(&format!(
                "{},{seed},{base},{fine},{pen}\n",
                format!("{transform:?}").to_lowercase()
            ));
        },
    )?;
    std::fs::write(out_dir.join("results.csv"), csv)?;
    let mut summary_csv = String::from("transform,mean_penalty\n");
    for (t, m) in &summary.mean_penalty {
        summary_csv.push_str(&format!("{t},{m}\n"));
        println!("{t}: mean penalty {m:.2} points");
    }
    std::fs::write(out_dir.join("summary.csv"), summary_csv)?;
    write_manifest(
        out_dir,
        command,
        &raw,
        seeds,
        vec!["results.csv".into(), "summary.csv".into()],
        started,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualFailureConfig {
    pub seed: u64,
    pub trials: usize,
    pub input_dim: usize,
    pub width: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub teacher_margin: f64,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub samples: usize,
}

impl Default for ResidualFailureConfig {
    fn default() -> Self {
        ResidualFailureConfig {
            seed: 1,
            trials: 20,
            input_dim: 8,
            width: 16,
            classes: 6,
            n_train: 4000,
            n_val: 1000,
            teacher_margin: 0.6,
            train_epochs: 40,
            train_lr: 0.01,
            samples: 300,
        }
    }
}

/// Residual dichotomy outcomes for one trial; shared with the acceptance
/// suite.
pub struct ResidualTrial {
    pub unequal_deviation: f64,
    pub equal_deviation: f64,
    pub in_block_penalty: f64,
    pub connection_penalty: f64,
}

/// Residual MLP with two depth-2 blocks joining layers 1 -> 3 -> 5.
fn residual_spec(input_dim: usize, width: usize, classes: usize) -> Result<NetworkSpec> {
    NetworkSpec::new(
        vec![input_dim, width, width, width, width, width, classes],
        vec![ActivationKind::Relu; 5],
        vec![false; 5],
        Some(ResidualSpec {
            layers: vec![3, 5],
            block_depth: 2,
        }),
    )
}

pub fn run_residual_failure(
    cfg: &ResidualFailureConfig,
    mut row: impl FnMut(usize, &ResidualTrial),
) -> Result<Vec<ResidualTrial>> {
    let spec = residual_spec(cfg.input_dim, cfg.width, cfg.classes)?;
    let mut rng = Rng::new(cfg.seed).substream(0x7e5);
    let total = cfg.n_train + cfg.n_val;
    let (ds, _) = teacher_dataset(&spec, total, cfg.teacher_margin, &mut rng)?;
    let (train_ds, val_ds) = ds.split_at(cfg.n_train);
    let tcfg = TrainConfig {
        epochs: cfg.train_epochs,
        learning_rate: cfg.train_lr,
        lr_drops: 2,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let w0 = init_weights(&spec, &mut Rng::new(cfg.seed ^ 0x33));
    let (f_w, _) = train(&spec, &w0, &train_ds, &val_ds, &tcfg)?;

    let mut out = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut trial_rng = rng.substream(trial as u64 + 1);
        let ga_unequal = GroupAssignment::random_unequal_residual(&spec, &mut trial_rng)?;
        let report = residual_failure_demo(&spec, &f_w, &ga_unequal, cfg.samples, &mut trial_rng)?;

        // Stitch the equal-element pair back together, once at a skip
        // connection and once strictly inside a block, both with the exact
        // group element for that layer.
        let ga_equal = ga_unequal.equalized_residual(&spec);
        let g_w = act_on_weights(&spec, &f_w, &ga_equal)?;
        let exact = |layer: usize| -> Result<StitchLayer> {
            let Element::Monomial(a) = ga_equal.element(layer) else {
                return Err(Error::Constraint("relu assignments are monomial".into()));
            };
            let phi = a.phi();
            StitchLayer::g_relu_exact(phi.perm(), phi.diag().to_vec())
        };
        let connection_layer = 3;
        let in_block_layer = 4;
        let conn_net = build_stitched(
            &spec,
            &f_w,
            &spec,
            &g_w,
            connection_layer,
            exact(connection_layer)?,
            false,
        )?;
        let connection_penalty =
            stitching_penalty(&spec, &f_w, &spec, &g_w, &conn_net, &val_ds)?;
        let block_net = build_stitched(
            &spec,
            &f_w,
            &spec,
            &g_w,
            in_block_layer,
            exact(in_block_layer)?,
            true,
        )?;
        let in_block_penalty =
            stitching_penalty(&spec, &f_w, &spec, &g_w, &block_net, &val_ds)?;

        let t = ResidualTrial {
            unequal_deviation: report.unequal_deviation,
            equal_deviation: report.equal_deviation,
            in_block_penalty,
            connection_penalty,
        };
        row(trial, &t);
        out.push(t);
    }
    Ok(out)
}

fn residual_failure(config_path: &Path, out_dir: &Path, command: &str) -> Result<()> {
    let started = Instant::now();
    let (cfg, raw): (ResidualFailureConfig, String) = load_config(config_path)?;
    let seed = cfg.seed;
    let mut csv = String::from(
        "trial,unequal_deviation,equal_deviation,in_block_penalty,connection_penalty\n",
    );
    let trials = run_residual_failure(&cfg, |i, t| {
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            t.unequal_deviation, t.equal_deviation, t.in_block_penalty, t.connection_penalty
        ));
    })?;
    std::fs::write(out_dir.join("results.csv"), csv)?;
    let broken = trials.iter().filter(|t| t.unequal_deviation > 1e-3).count();
    let preserved = trials.iter().filter(|t| t.equal_deviation < 1e-9).count();
    let report = serde_json::json!({
        "trials": trials.len(),
        "unequal_breaks_function": broken,
        "equal_preserves_function": preserved,
        "max_equal_deviation": trials.iter().map(|t| t.equal_deviation).fold(0.0, f64::max),
        "min_unequal_deviation": trials.iter().map(|t| t.unequal_deviation).fold(f64::INFINITY, f64::min),
    });
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "unequal elements broke the function in {broken}/{} trials; equal preserved in {preserved}/{}",
        trials.len(),
        trials.len()
    );
    write_manifest(
        out_dir,
        command,
        &raw,
        vec![seed],
        vec!["results.csv".into(), "report.json".into()],
        started,
    )
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct MetricGridConfig {
    f_weights: String,
    g_weights: String,
    data: DataKind,
    n: usize,
    seed: u64,
}

impl Default for MetricGridConfig {
    fn default() -> Self {
        MetricGridConfig {
            f_weights: String::new(),
            g_weights: String::new(),
            data: DataKind::Blobs,
            n: 1000,
            seed: 1,
        }
    }
}

fn hidden_features(
    spec: &NetworkSpec,
    w: &WeightSet,
    inputs: &Matrix,
    layer: usize,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(inputs.rows(), spec.width(layer));
    for i in 0..inputs.rows() {
        match forward_upto(spec, w, inputs.row(i), layer)? {
            HiddenState::Plain(v) => out.row_mut(i).copy_from_slice(&v),
            HiddenState::InBlock { partial, .. } => out.row_mut(i).copy_from_slice(&partial),
        }
    }
    Ok(out)
}

fn metric_grid(config_path: &Path, out_dir: &Path, command: &str) -> Result<()> {
    let started = Instant::now();
    let (cfg, raw): (MetricGridConfig, String) = load_config(config_path)?;
    if cfg.f_weights.is_empty() || cfg.g_weights.is_empty() {
        return Err(Error::InvalidSpec(
            "metric-grid config needs f_weights and g_weights paths".into(),
        ));
    }
    let (f_spec, f_w) = load_weights(Path::new(&cfg.f_weights))?;
    let (g_spec, g_w) = load_weights(Path::new(&cfg.g_weights))?;
    if f_spec.input_dim() != g_spec.input_dim() {
        return Err(Error::InvalidSpec("networks must share the input space".into()));
    }
    let (ds, _) = dataset_for(cfg.data, &f_spec, cfg.n, 0.5, cfg.seed)?;
    let inputs = ds.inputs;

    let mut artifacts: Vec<String> = Vec::new();
    let f_layers: Vec<usize> = (1..f_spec.depth()).collect();
    let g_layers: Vec<usize> = (1..g_spec.depth()).collect();
    let mut f_feats = Vec::new();
    let mut g_feats = Vec::new();
    for &l in &f_layers {
        let feats = hidden_features(&f_spec, &f_w, &inputs, l)?;
        let file = format!("features-f-l{l}.itwf");
        write_features_with_meta(
            &out_dir.join(&file),
            &FeatureData::Matrix(feats.clone()),
            &FeatureMeta {
                layer: l,
                model_id: "f".into(),
                seed: cfg.seed,
            },
        )?;
        artifacts.push(file);
        f_feats.push(feats);
    }
    for &l in &g_layers {
        let feats = hidden_features(&g_spec, &g_w, &inputs, l)?;
        let file = format!("features-g-l{l}.itwf");
        write_features_with_meta(
            &out_dir.join(&file),
            &FeatureData::Matrix(feats.clone()),
            &FeatureMeta {
                layer: l,
                model_id: "g".into(),
                seed: cfg.seed,
            },
        )?;
        artifacts.push(file);
        g_feats.push(feats);
    }

    for metric in ["grelu-procrustes", "orth-procrustes", "grelu-cka", "linear-cka"] {
        let mut csv = String::from("f_layer");
        for &gl in &g_layers {
            csv.push_str(&format!(",g{gl}"));
        }
        csv.push('\n');
        for (fi, &fl) in f_layers.iter().enumerate() {
            csv.push_str(&fl.to_string());
            for (gi, &gl) in g_layers.iter().enumerate() {
                let value = if metric.contains("cka") || f_spec.width(fl) == g_spec.width(gl) {
                    super::commands::compute_metric(
                        metric,
                        &FeatureData::Matrix(f_feats[fi].clone()),
                        &FeatureData::Matrix(g_feats[gi].clone()),
                    )?
                } else {
                    f64::NAN
                };
                csv.push_str(&format!(",{value}"));
            }
            csv.push('\n');
        }
        let file = format!("grid-{metric}.csv");
        std::fs::write(out_dir.join(&file), csv)?;
        artifacts.push(file);
    }
    println!("wrote metric grids for {} x {} layers", f_layers.len(), g_layers.len());
    write_manifest(out_dir, command, &raw, vec![cfg.seed], artifacts, started)
}

