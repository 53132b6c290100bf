//! Model checkpoints: a manifest plus one binary blob per tensor.
//!
//! A checkpoint is a directory containing `manifest.json` — format
//! version, model kind, architecture, and a checksummed tensor index —
//! and the tensor blobs it references. Writes stage everything in a
//! sibling temp directory and rename it into place, so a crashed or
//! failed save never leaves a partial checkpoint at the target path.
//! Loads verify the version, the kind, every checksum, and every shape
//! before any parameter is accepted.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emonet::{EmoNetConfig, EmoNetParams};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::tensor::Tensor;
use crate::temporal::TemporalModel;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Checkpoint `kind` values, one per model family.
pub const KIND_FLOW: &str = "flow";
pub const KIND_TEMPORAL: &str = "temporal";
pub const KIND_EMONET: &str = "emonet";

/// One tensor's row in the manifest index.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
    pub file: String,
}

/// Checkpoint header: everything needed to rebuild the model skeleton
/// and validate its parameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub kind: String,
    pub architecture: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Flow checkpoint architecture block.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FlowArchitecture {
    pub rows: usize,
    pub cols: usize,
    pub units: usize,
    pub feature_maps: usize,
    pub with_head: bool,
}

/// Temporal checkpoint architecture block.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TemporalArchitecture {
    pub rows: usize,
    pub group_cols: usize,
    pub frame_cols: usize,
    pub group_units: usize,
    pub frame_units: usize,
    pub feature_maps: usize,
    pub d_h: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write a checkpoint directory atomically: stage into `<dir>.tmp`,
/// then rename over the target.
pub fn write_checkpoint(
    dir: &Path,
    kind: &str,
    architecture: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let staging = staging_path(dir)?;
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let result = write_into(&staging, kind, architecture, tensors);
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
        return result;
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&staging, dir)?;
    Ok(())
}

fn staging_path(dir: &Path) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::invalid("write_checkpoint", "checkpoint path has no name"))?;
    let mut staged = name.to_os_string();
    staged.push(".tmp");
    Ok(dir.with_file_name(staged))
}

fn write_into(
    staging: &Path,
    kind: &str,
    architecture: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    for (i, (name, tensor)) in tensors.iter().enumerate() {
        let file = format!("t{i:04}.bin");
        let blob = tensor.to_blob();
        fs::write(staging.join(&file), &blob)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            sha256: sha256_hex(&blob),
            file,
        });
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        architecture,
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(staging.join(MANIFEST_NAME), json)?;
    Ok(())
}

/// Read and fully validate a checkpoint of the expected kind. Returns
/// the manifest and tensors in manifest order.
pub fn read_checkpoint(dir: &Path, expected_kind: &str) -> Result<(ModelManifest, Vec<Tensor>)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = fs::read_to_string(&manifest_path)?;
    let manifest: ModelManifest = serde_json::from_str(&json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    if manifest.kind != expected_kind {
        return Err(Error::Format {
            path: manifest_path.display().to_string(),
            msg: format!("kind \"{}\", expected \"{expected_kind}\"", manifest.kind),
        });
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let blob = fs::read(dir.join(&entry.file))?;
        let actual = sha256_hex(&blob);
        if actual != entry.sha256 {
            return Err(Error::Checksum {
                name: entry.name.clone(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        let tensor = Tensor::parse_blob(&blob)?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                path: dir.join(&entry.file).display().to_string(),
                msg: format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.name,
                    tensor.shape(),
                    entry.shape
                ),
            });
        }
        tensors.push(tensor);
    }
    Ok((manifest, tensors))
}

/// Collect (name, tensor) pairs from a visitor.
fn collect<'a, M>(model: &'a M, visit: impl Fn(&'a M, &mut dyn FnMut(&str, &Tensor))) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    visit(model, &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Overwrite a model's parameters from manifest-ordered tensors,
/// checking that names, order, and shapes line up exactly.
fn restore(
    dir: &Path,
    manifest: &ModelManifest,
    tensors: Vec<Tensor>,
    visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor) -> ()) ,
) -> Result<()> {
    let mut iter = manifest.tensors.iter().zip(tensors).peekable();
    let mut mismatch: Option<String> = None;
    visit_mut(&mut |name, slot| {
        if mismatch.is_some() {
            return;
        }
        match iter.next() {
            Some((entry, tensor)) => {
                if entry.name != name {
                    mismatch = Some(format!(
                        "parameter \"{name}\" does not match manifest entry \"{}\"",
                        entry.name
                    ));
                } else if tensor.shape() != slot.shape() {
                    mismatch = Some(format!(
                        "parameter \"{name}\": model shape {:?}, checkpoint {:?}",
                        slot.shape(),
                        tensor.shape()
                    ));
                } else {
                    *slot = tensor;
                }
            }
            None => mismatch = Some(format!("checkpoint is missing parameter \"{name}\"")),
        }
    });
    if mismatch.is_none() {
        if let Some((entry, _)) = iter.peek() {
            mismatch = Some(format!("checkpoint has extra tensor \"{}\"", entry.name));
        }
    }
    match mismatch {
        Some(msg) => Err(Error::Format {
            path: dir.display().to_string(),
            msg,
        }),
        None => Ok(()),
    }
}

/// Read only the `kind` field of a checkpoint, for dispatching loads
/// when the model family is not known up front.
pub fn checkpoint_kind(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = fs::read_to_string(&manifest_path)?;
    let manifest: ModelManifest = serde_json::from_str(&json)?;
    Ok(manifest.kind)
}

pub fn save_flow(dir: &Path, model: &FlowModel) -> Result<()> {
    let arch = FlowArchitecture {
        rows: model.rows,
        cols: model.cols,
        units: model.units.len(),
        feature_maps: model.feature_maps,
        with_head: model.head.is_some(),
    };
    let tensors = collect(model, FlowModel::visit);
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_checkpoint(dir, KIND_FLOW, serde_json::to_value(arch)?, &refs)
}

pub fn load_flow(dir: &Path) -> Result<FlowModel> {
    let (manifest, tensors) = read_checkpoint(dir, KIND_FLOW)?;
    let arch: FlowArchitecture = serde_json::from_value(manifest.architecture.clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = FlowModel::new(
        arch.rows,
        arch.cols,
        arch.units,
        arch.feature_maps,
        arch.with_head,
        &mut rng,
    )?;
    restore(dir, &manifest, tensors, |f| model.visit_mut(f))?;
    Ok(model)
}

pub fn save_temporal(dir: &Path, model: &TemporalModel) -> Result<()> {
    let arch = TemporalArchitecture {
        rows: model.group_flow.rows,
        group_cols: model.group_flow.cols,
        frame_cols: model.frame_flow.cols,
        group_units: model.group_flow.units.len(),
        frame_units: model.frame_flow.units.len(),
        feature_maps: model.group_flow.feature_maps,
        d_h: model.gru.d_h(),
    };
    let tensors = collect(model, TemporalModel::visit);
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_checkpoint(dir, KIND_TEMPORAL, serde_json::to_value(arch)?, &refs)
}

pub fn load_temporal(dir: &Path) -> Result<TemporalModel> {
    let (manifest, tensors) = read_checkpoint(dir, KIND_TEMPORAL)?;
    let arch: TemporalArchitecture = serde_json::from_value(manifest.architecture.clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = TemporalModel::new(
        arch.rows,
        arch.group_cols,
        arch.frame_cols,
        arch.group_units,
        arch.frame_units,
        arch.feature_maps,
        arch.d_h,
        &mut rng,
    )?;
    restore(dir, &manifest, tensors, |f| model.visit_mut(f))?;
    Ok(model)
}

pub fn save_emonet(dir: &Path, cfg: &EmoNetConfig, params: &EmoNetParams) -> Result<()> {
    let tensors = collect(params, EmoNetParams::visit);
    let refs: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_checkpoint(dir, KIND_EMONET, serde_json::to_value(cfg)?, &refs)
}

pub fn load_emonet(dir: &Path) -> Result<(EmoNetConfig, EmoNetParams)> {
    let (manifest, tensors) = read_checkpoint(dir, KIND_EMONET)?;
    let cfg: EmoNetConfig = serde_json::from_value(manifest.architecture.clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = EmoNetParams::new(&cfg, &mut rng)?;
    restore(dir, &manifest, tensors, |f| params.visit_mut(f))?;
    Ok((cfg, params))
}
