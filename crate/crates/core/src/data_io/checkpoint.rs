//! Checkpoints: a JSON manifest next to a blob of little-endian `f32`
//! tensors (plus packed palette indices).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::palettizers::{pack_indices, unpack_indices, Palette};
use crate::quantizers::QuantState;
use crate::regularizers::RegState;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "r2lab-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub reg: RegState,
    pub quant: Option<QuantState>,
    pub palettes: Vec<Palette>,
    pub seed: u64,
    pub config_hash: String,
}

/// Byte range inside the blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(flatten)]
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub layer: String,
    pub bits: u32,
    pub dim: usize,
    pub pad: usize,
    pub groups: usize,
    pub codebook: Region,
    pub indices: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub architecture: Architecture,
    pub architecture_name: String,
    pub seed: u64,
    pub config_hash: String,
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
    pub reg: RegState,
    pub quant: Option<QuantState>,
    pub palettes: Vec<PaletteEntry>,
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn push_f32(blob: &mut Vec<u8>, values: &[f64]) -> Result<Region> {
    let offset = blob.len() as u64;
    for &v in values {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Numeric(format!("value {v} does not fit in f32")));
        }
        blob.extend_from_slice(&f.to_le_bytes());
    }
    Ok(Region { offset, bytes: blob.len() as u64 - offset })
}

/// Writes `path` (manifest) and `path` with a `.bin` extension (blob).
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ck.model.named_tensors() {
        let region = push_f32(&mut blob, t.data())?;
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), dtype: "f32".into(), region });
    }
    let mut palettes = Vec::new();
    for p in &ck.palettes {
        p.validate()?;
        let codebook = push_f32(&mut blob, &p.codebook)?;
        let offset = blob.len() as u64;
        blob.extend_from_slice(&pack_indices(&p.assignments, p.bits));
        palettes.push(PaletteEntry {
            layer: p.layer_name.clone(),
            bits: p.bits,
            dim: p.dim,
            pad: p.pad,
            groups: p.assignments.len(),
            codebook,
            indices: Region { offset, bytes: blob.len() as u64 - offset },
        });
    }
    let bp = blob_path(path);
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        architecture: ck.model.arch.clone(),
        architecture_name: ck.model.arch.name(),
        seed: ck.seed,
        config_hash: ck.config_hash.clone(),
        blob: bp
            .file_name()
            .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?
            .to_string_lossy()
            .into_owned(),
        blob_bytes: blob.len() as u64,
        tensors,
        reg: ck.reg.clone(),
        quant: ck.quant.clone(),
        palettes,
    };
    atomic_write(&bp, &blob)?;
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    atomic_write(path, &text)
}

fn corrupt(msg: String) -> Error {
    Error::Corruption(msg)
}

fn check_regions(manifest: &Manifest) -> Result<()> {
    let mut regions: Vec<(Region, String)> = manifest
        .tensors
        .iter()
        .map(|t| (t.region, t.name.clone()))
        .chain(manifest.palettes.iter().flat_map(|p| {
            [(p.codebook, format!("{} codebook", p.layer)), (p.indices, format!("{} indices", p.layer))]
        }))
        .collect();
    for (r, name) in &regions {
        let end = r.offset.checked_add(r.bytes);
        if end.is_none_or(|e| e > manifest.blob_bytes) {
            return Err(corrupt(format!(
                "{name}: bytes {}..+{} exceed blob of {}",
                r.offset, r.bytes, manifest.blob_bytes
            )));
        }
    }
    regions.sort_by_key(|(r, _)| (r.offset, r.bytes));
    for w in regions.windows(2) {
        if w[0].0.offset + w[0].0.bytes > w[1].0.offset {
            return Err(corrupt(format!("{} overlaps {}", w[0].1, w[1].1)));
        }
    }
    Ok(())
}

fn read_f32(blob: &[u8], r: Region, what: &str) -> Result<Vec<f64>> {
    if !r.bytes.is_multiple_of(4) {
        return Err(corrupt(format!("{what}: {} bytes is not a whole number of f32", r.bytes)));
    }
    let slice = &blob[r.offset as usize..(r.offset + r.bytes) as usize];
    slice
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if v.is_finite() {
                Ok(v as f64)
            } else {
                Err(corrupt(format!("{what}: non-finite value")))
            }
        })
        .collect()
}

/// Loads a checkpoint. A `config_hash` that differs from `expected_hash`
/// is reported as a warning, not an error.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<(Checkpoint, Vec<String>)> {
    let text = std::fs::read(path)?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", manifest.format)));
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = std::fs::read(&blob_file)?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    check_regions(&manifest)?;

    let mut model = Model::new(manifest.architecture.clone(), 0)
        .map_err(|e| corrupt(format!("architecture: {e}")))?;
    let expected: BTreeMap<String, Vec<usize>> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if manifest.tensors.len() != expected.len() {
        return Err(corrupt(format!(
            "{} tensors listed, architecture has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(corrupt(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        match expected.get(&entry.name) {
            Some(shape) if *shape == entry.shape => {}
            _ => return Err(corrupt(format!("{}: unexpected tensor or shape", entry.name))),
        }
        let numel: usize = entry.shape.iter().product();
        if entry.region.bytes != numel as u64 * 4 {
            return Err(corrupt(format!("{}: {} bytes for {numel} values", entry.name, entry.region.bytes)));
        }
        let data = read_f32(&blob, entry.region, &entry.name)?;
        model.set_tensor(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
    }

    let mut palettes = Vec::new();
    for p in &manifest.palettes {
        let params = model
            .weights()
            .into_iter()
            .find(|(n, _)| *n == p.layer)
            .map(|(_, w)| w.numel())
            .ok_or_else(|| corrupt(format!("palette for unknown layer {}", p.layer)))?;
        if !(1..=16).contains(&p.bits) || p.dim == 0 || p.groups * p.dim != params + p.pad {
            return Err(corrupt(format!("{}: palette geometry does not match the layer", p.layer)));
        }
        let codebook = read_f32(&blob, p.codebook, &p.layer)?;
        let indices_bytes = &blob[p.indices.offset as usize..(p.indices.offset + p.indices.bytes) as usize];
        if indices_bytes.len() != (p.groups * p.bits as usize).div_ceil(8) {
            return Err(corrupt(format!("{}: index region has the wrong size", p.layer)));
        }
        let assignments = unpack_indices(indices_bytes, p.bits, p.groups)?;
        let palette = Palette {
            layer_name: p.layer.clone(),
            bits: p.bits,
            dim: p.dim,
            codebook,
            assignments,
            pad: p.pad,
        };
        palette.validate().map_err(|e| corrupt(e.to_string()))?;
        palettes.push(palette);
    }

    let mut warnings = Vec::new();
    if let Some(h) = expected_hash {
        if h != manifest.config_hash {
            warnings.push(format!(
                "checkpoint {} was written under config {}, current config is {h}",
                path.display(),
                manifest.config_hash
            ));
        }
    }
    Ok((
        Checkpoint {
            model,
            reg: manifest.reg,
            quant: manifest.quant,
            palettes,
            seed: manifest.seed,
            config_hash: manifest.config_hash,
        },
        warnings,
    ))
}
