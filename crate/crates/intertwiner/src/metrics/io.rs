use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::tensor4::FeatureTensor4;
use crate::numerics::Matrix;

/// Magic prefix of the flat binary feature format: magic, u32 ndim,
/// u32 dims[ndim], little-endian f64 payload in index order.
pub const FEATURE_MAGIC: &[u8; 5] = b"ITWF1";

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureData {
    Matrix(Matrix),
    Tensor4(FeatureTensor4),
}

impl FeatureData {
    pub fn n_examples(&self) -> usize {
        match self {
            FeatureData::Matrix(m) => m.rows(),
            FeatureData::Tensor4(t) => t.dims().0,
        }
    }
}

/// JSON sidecar written next to a feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub layer: usize,
    pub model_id: String,
    pub seed: u64,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

pub fn write_features(path: &Path, data: &FeatureData) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(FEATURE_MAGIC)?;
    let (dims, payload): (Vec<u32>, &[f64]) = match data {
        FeatureData::Matrix(m) => (vec![m.rows() as u32, m.cols() as u32], m.as_slice()),
        FeatureData::Tensor4(t) => {
            let (n, c, h, w) = t.dims();
            (vec![n as u32, c as u32, h as u32, w as u32], t.data())
        }
    };
    file.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in &dims {
        file.write_all(&d.to_le_bytes())?;
    }
    for v in payload {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Write the binary file plus its `<path>.json` metadata sidecar.
pub fn write_features_with_meta(path: &Path, data: &FeatureData, meta: &FeatureMeta) -> Result<()> {
    write_features(path, data)?;
    let sidecar = sidecar_path(path);
    std::fs::write(sidecar, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

pub fn read_features(path: &Path) -> Result<FeatureData> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)
        .map_err(|_| format_err(path, "truncated header"))?;
    if &magic != FEATURE_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)
        .map_err(|_| format_err(path, "truncated ndim"))?;
    let ndim = u32::from_le_bytes(u32buf);
    if ndim != 2 && ndim != 4 {
        return Err(format_err(path, format!("unsupported ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        file.read_exact(&mut u32buf)
            .map_err(|_| format_err(path, "truncated dims"))?;
        dims.push(u32::from_le_bytes(u32buf) as usize);
    }
    let count: usize = dims.iter().product();
    let mut payload = vec![0.0f64; count];
    let mut f64buf = [0u8; 8];
    for slot in payload.iter_mut() {
        file.read_exact(&mut f64buf)
            .map_err(|_| format_err(path, "truncated payload"))?;
        *slot = f64::from_le_bytes(f64buf);
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    match ndim {
        2 => Ok(FeatureData::Matrix(
            Matrix::from_vec(dims[0], dims[1], payload)
                .map_err(|e| format_err(path, e.to_string()))?,
        )),
        4 => Ok(FeatureData::Tensor4(
            FeatureTensor4::from_vec(dims[0], dims[1], dims[2], dims[3], payload)
                .map_err(|e| format_err(path, e.to_string()))?,
        )),
        _ => unreachable!(),
    }
}

pub fn read_feature_meta(path: &Path) -> Result<FeatureMeta> {
    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar)?;
    Ok(serde_json::from_str(&text).map_err(|e| format_err(&sidecar, e.to_string()))?)
}
