use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::spec::{validate_weights, BatchNormParams, LayerWeights, NetworkSpec, WeightSet};
use crate::numerics::Matrix;

pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BnFile {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    bn: Option<BnFile>,
}

#[derive(Serialize, Deserialize)]
struct WeightFile {
    format_version: u32,
    spec: NetworkSpec,
    layers: Vec<LayerFile>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Serialize weights to JSON. Floats are written in shortest round-trip
/// decimal form, so save/load is bit-exact.
pub fn weights_to_json(spec: &NetworkSpec, w: &WeightSet) -> Result<String> {
    validate_weights(spec, w)?;
    let layers = w
        .layers
        .iter()
        .map(|lw| LayerFile {
            w: (0..lw.w.rows()).map(|i| lw.w.row(i).to_vec()).collect(),
            b: lw.bias.clone().unwrap_or_default(),
            bn: lw.bn.as_ref().map(|bn| BnFile {
                gamma: bn.gamma.clone(),
                beta: bn.beta.clone(),
                mean: bn.running_mean.clone(),
                var: bn.running_var.clone(),
            }),
        })
        .collect();
    let file = WeightFile {
        format_version: WEIGHT_FORMAT_VERSION,
        spec: spec.clone(),
        layers,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_weights(path: &Path, spec: &NetworkSpec, w: &WeightSet) -> Result<()> {
    let json = weights_to_json(spec, w)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(NetworkSpec, WeightSet)> {
    let text = std::fs::read_to_string(path)?;
    let file: WeightFile =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    if file.format_version != WEIGHT_FORMAT_VERSION {
        return Err(format_err(
            path,
            format!(
                "unsupported format_version {} (expected {WEIGHT_FORMAT_VERSION})",
                file.format_version
            ),
        ));
    }
    file.spec.validate().map_err(|e| format_err(path, e.to_string()))?;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (idx, lf) in file.layers.into_iter().enumerate() {
        let w = Matrix::from_rows(&lf.w).map_err(|e| format_err(path, e.to_string()))?;
        let bias = if lf.b.is_empty() { None } else { Some(lf.b) };
        let bn = lf.bn.map(|bn| BatchNormParams {
            gamma: bn.gamma,
            beta: bn.beta,
            running_mean: bn.mean,
            running_var: bn.var,
        });
        if bias.is_some() && bn.is_some() {
            return Err(format_err(
                path,
                format!("layer {}: has both bias and batch norm", idx + 1),
            ));
        }
        layers.push(LayerWeights { w, bias, bn });
    }
    let weights = WeightSet { layers };
    validate_weights(&file.spec, &weights).map_err(|e| format_err(path, e.to_string()))?;
    Ok((file.spec, weights))
}
