use std::path::Path;
use std::time::Instant;

use crate::cli::{resolve_out, write_manifest, Flags};
use crate::error::{Error, Result};
use crate::intertwiner::Element;
use crate::metrics::{
    g_relu_cka, g_relu_cka_4d, g_relu_procrustes, g_relu_procrustes_4d, linear_cka, linear_cka_4d,
    orthogonal_procrustes, orthogonal_procrustes_4d, read_features, FeatureData,
};
use crate::network::{
    act_on_weights, act_on_weights_unchecked, load_weights, save_weights, verify_function_equal,
    GroupAssignment, NetworkSpec,
};
use crate::numerics::Rng;
use crate::stitching::{run_stitch_pipeline, StitchConfig, StitchVariant};
use crate::network::init_weights;
use crate::trainer::{
    synth_dataset, teacher_dataset, train, DataKind, Dataset, EpochStats, OptimizerKind,
    TrainConfig, DEFAULT_TEACHER_MARGIN,
};

pub(crate) fn load_spec_file(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec: NetworkSpec = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    spec.validate().map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(spec)
}

/// Dataset for a network: teacher kind labels inputs with a fresh random
/// network of the same architecture, so the task is realizable by it.
pub(crate) fn dataset_for(
    kind: DataKind,
    spec: &NetworkSpec,
    n: usize,
    val_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_frac) || n < 10 {
        return Err(Error::InvalidSpec("need n >= 10 and val-frac in [0,1)".into()));
    }
    let mut rng = Rng::new(seed).substream(0x44);
    let ds = match kind {
        DataKind::Teacher => teacher_dataset(spec, n, DEFAULT_TEACHER_MARGIN, &mut rng)?.0,
        other => synth_dataset(other, spec.input_dim(), spec.output_dim(), n, &mut rng)?,
    };
    let n_train = ((1.0 - val_frac) * n as f64).round() as usize;
    Ok(ds.split_at(n_train.clamp(1, n - 1)))
}

pub(crate) fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for e in history {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_acc));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn train_config_from_flags(flags: &Flags, seed: u64) -> Result<TrainConfig> {
    let optimizer = match flags.get("optimizer").unwrap_or("adam") {
        "adam" => OptimizerKind::adam(),
        "sgd" => OptimizerKind::sgd(flags.parse_num("momentum", 0.9)?),
        other => {
            return Err(Error::InvalidSpec(format!(
                "unknown optimizer '{other}' (adam or sgd)"
            )))
        }
    };
    let cfg = TrainConfig {
        epochs: flags.parse_num("epochs", 50)?,
        batch_size: flags.parse_num("batch", 32)?,
        learning_rate: flags.parse_num("lr", 1e-3)?,
        lr_drops: flags.parse_num("drops", 4)?,
        optimizer,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `itw train`: train a network described by a spec file on a synthetic
/// task; writes weights.json, history.csv and the manifest.
pub(crate) fn cmd_train(flags: &Flags, command: &str) -> Result<()> {
    let started = Instant::now();
    let spec = load_spec_file(Path::new(flags.require("spec")?))?;
    let kind: DataKind = flags.require("data")?.parse()?;
    let out_dir = resolve_out(flags.require("out")?);
    let seed = flags.seed()?;
    let n = flags.parse_num("n", 4000usize)?;
    let val_frac = flags.parse_num("val-frac", 0.2f64)?;
    let cfg = train_config_from_flags(flags, seed)?;

    let (train_ds, val_ds) = dataset_for(kind, &spec, n, val_frac, seed)?;
    let w0 = init_weights(&spec, &mut Rng::new(seed));
    let (best_w, history) = train(&spec, &w0, &train_ds, &val_ds, &cfg)?;

    std::fs::create_dir_all(&out_dir)?;
    save_weights(&out_dir.join("weights.json"), &spec, &best_w)?;
    write_history_csv(&out_dir.join("history.csv"), &history)?;
    let best = history.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    println!("trained {} epochs, best val acc {:.4}", history.len(), best);
    write_manifest(
        &out_dir,
        command,
        &serde_json::to_string(&cfg)?,
        vec![seed],
        vec!["weights.json".into(), "history.csv".into()],
        started,
    )
}

fn load_assignment(path: &Path, spec: &NetworkSpec) -> Result<GroupAssignment> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let elements_json = value
        .get("elements")
        .and_then(|v| v.as_array())
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            detail: "missing 'elements' array".into(),
        })?;
    let mut elements = Vec::with_capacity(elements_json.len());
    for e in elements_json {
        elements.push(Element::from_json(e)?);
    }
    let bn_scales: Vec<Option<Vec<f64>>> = match value.get("bn_scales") {
        None | Some(serde_json::Value::Null) => vec![None; elements.len()],
        Some(v) => serde_json::from_value(v.clone())?,
    };
    GroupAssignment::new_allow_unequal_residual(spec, elements, bn_scales)
}

/// `itw transform`: act on saved weights with a group assignment and verify
/// the realized function is unchanged; writes the transformed weights and a
/// JSON report with the max functional deviation.
pub(crate) fn cmd_transform(flags: &Flags, command: &str) -> Result<()> {
    let started = Instant::now();
    let weights_path = Path::new(flags.require("weights")?).to_path_buf();
    let (spec, w) = load_weights(&weights_path)?;
    let seed = flags.seed()?;
    let out_path = resolve_out(flags.require("out")?);
    let samples = flags.parse_num("samples", 1000usize)?;
    let mut rng = Rng::new(seed);

    let assignment_arg = flags.require("assignment")?;
    let ga = if assignment_arg == "random" {
        GroupAssignment::random(&spec, &mut rng)?
    } else {
        load_assignment(Path::new(assignment_arg), &spec)?
    };

    let w2 = if flags.has("force") {
        act_on_weights_unchecked(&spec, &w, &ga)?
    } else {
        act_on_weights(&spec, &w, &ga)?
    };
    let deviation = verify_function_equal(&spec, &w, &w2, samples, &mut rng)?;

    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_weights(&out_path, &spec, &w2)?;
    let report = serde_json::json!({
        "max_function_deviation": deviation,
        "samples": samples,
        "forced": flags.has("force"),
    });
    let report_path = out_path.with_extension("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    println!("max function deviation over {samples} samples: {deviation:.3e}");

    let dir = out_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    write_manifest(
        &dir,
        command,
        assignment_arg,
        vec![seed],
        vec![
            out_path.display().to_string(),
            report_path.display().to_string(),
        ],
        started,
    )
}

/// `itw metric`: one similarity value for a pair of feature files, printed
/// with 10 significant digits, optionally appended to a CSV.
pub(crate) fn cmd_metric(flags: &Flags, _command: &str) -> Result<()> {
    let x_path = flags.require("x")?.to_string();
    let y_path = flags.require("y")?.to_string();
    let metric = flags.require("metric")?.to_string();
    let x = read_features(Path::new(&x_path))?;
    let y = read_features(Path::new(&y_path))?;
    let value = compute_metric(&metric, &x, &y)?;
    println!("{value:.9}");
    if let Some(csv) = flags.get("csv") {
        let path = resolve_out(csv);
        let mut line = String::new();
        if !path.exists() {
            line.push_str("x,y,metric,value\n");
        }
        line.push_str(&format!("{x_path},{y_path},{metric},{value}\n"));
        use std::io::Write;
        let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        file.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub(crate) fn compute_metric(name: &str, x: &FeatureData, y: &FeatureData) -> Result<f64> {
    match (x, y) {
        (FeatureData::Matrix(xm), FeatureData::Matrix(ym)) => match name {
            "grelu-procrustes" => g_relu_procrustes(xm, ym),
            "orth-procrustes" => orthogonal_procrustes(xm, ym),
            "grelu-cka" => g_relu_cka(xm, ym),
            "linear-cka" => linear_cka(xm, ym),
            other => Err(Error::InvalidSpec(format!("unknown metric '{other}'"))),
        },
        (FeatureData::Tensor4(xt), FeatureData::Tensor4(yt)) => match name {
            "grelu-procrustes" => g_relu_procrustes_4d(xt, yt),
            "orth-procrustes" => orthogonal_procrustes_4d(xt, yt),
            "grelu-cka" => g_relu_cka_4d(xt, yt),
            "linear-cka" => linear_cka_4d(xt, yt),
            other => Err(Error::InvalidSpec(format!("unknown metric '{other}'"))),
        },
        _ => Err(Error::shape("cmd_metric", "mixed 2-D and 4-D feature files")),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidSpec(format!("cannot parse {what} '{s}'")))
        })
        .collect()
}

/// `itw stitch`: full pipeline (train, threshold, recalibrate, evaluate)
/// over a grid of layers and variants; one CSV row per cell.
pub(crate) fn cmd_stitch(flags: &Flags, command: &str) -> Result<()> {
    let started = Instant::now();
    let (f_spec, f_w) = load_weights(Path::new(flags.require("f")?))?;
    let (g_spec, g_w) = load_weights(Path::new(flags.require("g")?))?;
    let layers: Vec<usize> = parse_list(flags.require("layer")?, "layer")?;
    let variant_names: Vec<String> = flags
        .require("variant")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let kind: DataKind = flags.require("data")?.parse()?;
    let seed = flags.seed()?;
    let out_dir = resolve_out(flags.require("out")?);
    let n = flags.parse_num("n", 4000usize)?;
    if f_spec.input_dim() != g_spec.input_dim() || f_spec.output_dim() != g_spec.output_dim() {
        return Err(Error::InvalidSpec(
            "stitched networks must share input and output dimensions".into(),
        ));
    }
    let (train_ds, val_ds) = dataset_for(kind, &f_spec, n, 0.2, seed)?;

    std::fs::create_dir_all(&out_dir)?;
    let mut csv = String::from("layer,variant,seed,penalty,acc_f,acc_g,acc_stitched\n");
    let mut artifacts = vec!["results.csv".into()];
    for &layer in &layers {
        for name in &variant_names {
            let variant: StitchVariant = name.parse()?;
            let cfg = StitchConfig {
                layer_index: layer,
                epochs: flags.parse_num("epochs", 20)?,
                batch_size: flags.parse_num("batch", 32)?,
                learning_rate: flags.parse_num("lr", 1e-3)?,
                momentum: flags.parse_num("momentum", 0.9)?,
                sinkhorn_iters: flags.parse_num("sinkhorn-iters", 16)?,
                reg_alpha: flags.parse_num("alpha", 0.1)?,
                head_start_epochs: flags.parse_num("head-start", 10)?,
                rank: flags.parse_num("rank", 1)?,
                seed,
            };
            let outcome = run_stitch_pipeline(
                &f_spec, &f_w, &g_spec, &g_w, variant, &train_ds, &val_ds, &cfg,
            )?;
            csv.push_str(&format!(
                "{layer},{name},{seed},{},{},{},{}\n",
                outcome.penalty_points, outcome.acc_f, outcome.acc_g, outcome.acc_stitched
            ));
            let layer_file = format!("stitch-l{layer}-{name}.json");
            std::fs::write(
                out_dir.join(&layer_file),
                serde_json::to_string_pretty(&outcome.evaluated.to_json())?,
            )?;
            let history_file = format!("history-l{layer}-{name}.csv");
            write_history_csv(&out_dir.join(&history_file), &outcome.history)?;
            artifacts.push(layer_file);
            artifacts.push(history_file);
            println!(
                "layer {layer} {name}: penalty {:.2} points (f {:.3}, g {:.3}, stitched {:.3})",
                outcome.penalty_points, outcome.acc_f, outcome.acc_g, outcome.acc_stitched
            );
        }
    }
    std::fs::write(out_dir.join("results.csv"), csv)?;
    write_manifest(&out_dir, command, &format!("{layers:?}"), vec![seed], artifacts, started)
}

