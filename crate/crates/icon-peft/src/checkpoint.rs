//! Checkpoints: a JSON manifest plus a sibling blob of little-endian `f32`.

use std::path::{Path, PathBuf};

use icon_peft_core::adapters::AdapterRecipe;
use icon_peft_core::backbone::ViTConfig;
use icon_peft_core::model::Model;
use icon_peft_core::params::Owner;
use icon_peft_core::Real;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const FORMAT: &str = "icon-peft-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub config_hash: String,
    pub model: ViTConfig,
    pub recipe: AdapterRecipe,
    pub tensors: Vec<TensorEntry>,
}

/// SHA-256 over the canonical JSON of model geometry and recipe.
pub fn config_hash(model: &ViTConfig, recipe: &AdapterRecipe) -> String {
    let bytes = serde_json::to_vec(&(model, recipe)).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (weights in registry order).
pub fn save<T: Real>(model: &Model<T>, path: &Path) -> CliResult<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (e, t) in model.registry().entries().iter().zip(model.store.tensors()) {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset: blob.len(),
            trainable: e.trainable,
        });
        for v in t.data() {
            blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let bin = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f32".into(),
        blob: bin.file_name().expect("manifest has a file name").to_string_lossy().into_owned(),
        config_hash: config_hash(model.cfg(), model.recipe()),
        model: model.cfg().clone(),
        recipe: model.recipe().clone(),
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    std::fs::write(&bin, blob).map_err(|e| CliError::io(&bin, e))?;
    Ok(())
}

/// Reads and structurally validates a manifest and its blob.
pub fn read(path: &Path) -> CliResult<(Manifest, Vec<f32>)> {
    let bad = |msg: String| CliError::Core(icon_peft_core::Error::Validation(format!("{}: {msg}", path.display())));
    let text = std::fs::read_to_string(path).map_err(|e| bad(format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| bad(format!("malformed manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION || manifest.dtype != "f32" {
        return Err(bad(format!(
            "unsupported checkpoint {} v{} ({})",
            manifest.format, manifest.version, manifest.dtype
        )));
    }
    let bin = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&bin).map_err(|e| bad(format!("cannot read blob {}: {e}", bin.display())))?;
    let mut expected = 0;
    for t in &manifest.tensors {
        if t.offset != expected {
            return Err(bad(format!("tensor {} starts at byte {}, expected {expected}", t.name, t.offset)));
        }
        expected += 4 * t.shape.iter().product::<usize>();
    }
    if bytes.len() != expected {
        return Err(bad(format!("blob holds {} bytes, manifest describes {expected}", bytes.len())));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((manifest, values))
}

/// Which tensors [`load_into`] copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadScope {
    /// Every tensor; names and shapes must match the live model one to one.
    All,
    /// Backbone and head tensors only; adapter tensors keep their values.
    Backbone,
}

/// Copies checkpoint values into `model`, validating every shape.
pub fn load_into<T: Real>(model: &mut Model<T>, path: &Path, scope: LoadScope) -> CliResult<Manifest> {
    let (manifest, values) = read(path)?;
    let mismatch = |msg: String| CliError::Core(icon_peft_core::Error::Validation(format!("{}: {msg}", path.display())));
    let ids: Vec<_> = model.registry().ids().collect();
    if scope == LoadScope::All && manifest.tensors.len() != ids.len() {
        return Err(mismatch(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.tensors.len(),
            ids.len()
        )));
    }
    for id in ids {
        let e = model.registry().get(id).clone();
        if scope == LoadScope::Backbone && e.owner == Owner::Adapter {
            continue;
        }
        let t = manifest
            .tensors
            .iter()
            .find(|t| t.name == e.name)
            .ok_or_else(|| mismatch(format!("checkpoint has no tensor {}", e.name)))?;
        if t.shape != e.shape {
            return Err(mismatch(format!(
                "tensor {} has shape {:?} in checkpoint, model expects {:?}",
                e.name, t.shape, e.shape
            )));
        }
        let start = t.offset / 4;
        let src = &values[start..start + e.numel()];
        for (d, &s) in model.store.get_mut(id).data_mut().iter_mut().zip(src) {
            *d = T::from_f64(s as f64);
        }
    }
    Ok(manifest)
}
