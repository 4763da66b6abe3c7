//! Model checkpoints: a directory holding `manifest.json` and three flat
//! little-endian `f32` arrays.
//!
//! * `homography.bin`: `T×8` row-major, rows in frame order.
//! * `residual.bin`, `canonical.bin`: for each layer from input to output,
//!   the `fan_in×fan_out` weight matrix row-major, then the `fan_out` bias.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::mlp::{Dense, Mlp};
use super::{CanonicalField, FieldError, HomographyTrajectory, NarcanModel, ResidualField};
use crate::frames_io::atomic_write;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const HOMOGRAPHY_FILE: &str = "homography.bin";
pub const RESIDUAL_FILE: &str = "residual.bin";
pub const CANONICAL_FILE: &str = "canonical.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(rename = "T")]
    pub frame_count: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub pe_freqs_spatial: usize,
    pub pe_freqs_time: usize,
    pub pe_freqs_canonical: usize,
    pub layers_g: Vec<usize>,
    pub layers_f: Vec<usize>,
    pub version: u32,
    /// Extra keys owned by callers (segment plans and the like).
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ModelManifest {
    pub fn for_model(model: &NarcanModel) -> Self {
        let cfg = model.field_config();
        Self {
            frame_count: model.frame_count(),
            height: model.height(),
            width: model.width(),
            pe_freqs_spatial: cfg.pe_freqs_spatial,
            pe_freqs_time: cfg.pe_freqs_time,
            pe_freqs_canonical: cfg.pe_freqs_canonical,
            layers_g: cfg.layers_g,
            layers_f: cfg.layers_f,
            version: CHECKPOINT_VERSION,
            extra: serde_json::Map::new(),
        }
    }
}

fn ckpt_err(path: &Path, reason: impl ToString) -> FieldError {
    FieldError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn to_le_bytes<'a>(values: impl Iterator<Item = &'a f64>) -> Vec<u8> {
    values.flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn mlp_bytes(mlp: &Mlp) -> Vec<u8> {
    let mut out = Vec::with_capacity(mlp.parameter_count() * 4);
    for layer in mlp.layers() {
        out.extend(to_le_bytes(layer.weight.iter()));
        out.extend(to_le_bytes(layer.bias.iter()));
    }
    out
}

fn read_f32s(path: &Path) -> Result<Vec<f64>, FieldError> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(ckpt_err(path, format!("length {} is not a multiple of 4", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect())
}

fn mlp_from_values(path: &Path, values: &[f64], dims: &[usize]) -> Result<Mlp, FieldError> {
    let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if values.len() != expected {
        return Err(ckpt_err(path, format!("expected {expected} values, found {}", values.len())));
    }
    let mut offset = 0;
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weight = Array2::from_shape_vec((fan_in, fan_out), values[offset..offset + fan_in * fan_out].to_vec())
            .expect("sized slice");
        offset += fan_in * fan_out;
        let bias = Array1::from(values[offset..offset + fan_out].to_vec());
        offset += fan_out;
        layers.push(Dense { weight, bias });
    }
    Ok(Mlp::from_layers(layers))
}

/// Writes `model` into `dir` (created if needed); `extra` keys are merged
/// into the manifest.
pub fn save_model(model: &NarcanModel, dir: &Path, extra: serde_json::Map<String, serde_json::Value>) -> Result<(), FieldError> {
    fs::create_dir_all(dir).map_err(|e| ckpt_err(dir, e))?;
    let mut manifest = ModelManifest::for_model(model);
    manifest.extra = extra;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| ckpt_err(dir, e))?;
    atomic_write(&dir.join(HOMOGRAPHY_FILE), &to_le_bytes(model.homography.params().iter()))?;
    atomic_write(&dir.join(RESIDUAL_FILE), &mlp_bytes(model.residual.mlp()))?;
    atomic_write(&dir.join(CANONICAL_FILE), &mlp_bytes(model.canonical.mlp()))?;
    // manifest last: its presence marks a complete checkpoint
    atomic_write(&dir.join(MANIFEST_FILE), &json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<ModelManifest, FieldError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| ckpt_err(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| ckpt_err(&path, e))
}

pub fn load_model(dir: &Path) -> Result<(NarcanModel, ModelManifest), FieldError> {
    let manifest = read_manifest(dir)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(ckpt_err(&dir.join(MANIFEST_FILE), format!("unsupported version {}", manifest.version)));
    }
    let hpath = dir.join(HOMOGRAPHY_FILE);
    let hvals = read_f32s(&hpath)?;
    if hvals.len() != manifest.frame_count * 8 {
        return Err(ckpt_err(&hpath, format!("expected {} values, found {}", manifest.frame_count * 8, hvals.len())));
    }
    let homography = HomographyTrajectory::from_params(Array2::from_shape_vec((manifest.frame_count, 8), hvals).expect("sized"))?;

    let g_in = 3 + 4 * manifest.pe_freqs_spatial + 2 * manifest.pe_freqs_time;
    let g_dims: Vec<usize> = std::iter::once(g_in).chain(manifest.layers_g.iter().copied()).chain([2]).collect();
    let rpath = dir.join(RESIDUAL_FILE);
    let residual = ResidualField::from_mlp(
        mlp_from_values(&rpath, &read_f32s(&rpath)?, &g_dims)?,
        manifest.pe_freqs_spatial,
        manifest.pe_freqs_time,
    )?;

    let f_in = 2 + 4 * manifest.pe_freqs_canonical;
    let f_dims: Vec<usize> = std::iter::once(f_in).chain(manifest.layers_f.iter().copied()).chain([3]).collect();
    let cpath = dir.join(CANONICAL_FILE);
    let canonical = CanonicalField::from_mlp(mlp_from_values(&cpath, &read_f32s(&cpath)?, &f_dims)?, manifest.pe_freqs_canonical)?;

    let model = NarcanModel::from_parts(homography, residual, canonical, manifest.height, manifest.width)?;
    Ok((model, manifest))
}

/// Rounds every parameter through `f32`, matching what a save/load cycle
/// produces.
pub fn quantize_to_f32(model: &mut NarcanModel) {
    let q = |v: &mut f64| *v = f64::from(*v as f32);
    model.homography.params_mut().iter_mut().for_each(q);
    for mlp in [model.residual.mlp_mut(), model.canonical.mlp_mut()] {
        for layer in mlp.layers_mut() {
            layer.weight.iter_mut().for_each(q);
            layer.bias.iter_mut().for_each(q);
        }
    }
}

/// Subdirectory name for segment `i` of a multi-model checkpoint.
pub fn segment_dir_name(i: usize) -> String {
    format!("segment_{i:02}")
}

pub fn segment_dir(root: &Path, i: usize) -> PathBuf {
    root.join(segment_dir_name(i))
}
