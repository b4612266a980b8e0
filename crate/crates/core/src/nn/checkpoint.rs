//! Parameter checkpoints: a directory holding `manifest.json` (names, shapes,
//! offsets, config hash) and `arrays.bin` (little-endian `f64`, concatenated in
//! manifest order). Writes go to a temporary sibling and are renamed into place.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "rul-checkpoint/1";
const MANIFEST: &str = "manifest.json";
const ARRAYS: &str = "arrays.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `arrays.bin`, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: String,
    pub epoch: Option<usize>,
    pub arrays: Vec<ArrayEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    config_hash: &str,
    epoch: Option<usize>,
) -> Result<()> {
    let mut arrays = Vec::with_capacity(store.len());
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    let mut offset = 0;
    for (_, p) in store.iter() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
        });
        offset += p.value.len();
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        config_hash: config_hash.to_string(),
        epoch,
        arrays,
    };

    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?;
    let tmp = dir.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(tmp.join(MANIFEST), json).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;
    fs::write(tmp.join(ARRAYS), bytes).map_err(|e| Error::io(tmp.join(ARRAYS), e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Vec<Tensor>)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format {}",
            mpath.display(),
            manifest.format
        )));
    }
    let apath = dir.join(ARRAYS);
    let bytes = fs::read(&apath).map_err(|e| Error::io(&apath, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{}: truncated", apath.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let n: usize = entry.shape.iter().product();
        let slice = values.get(entry.offset..entry.offset + n).ok_or_else(|| {
            Error::Checkpoint(format!("{}: array {} out of bounds", apath.display(), entry.name))
        })?;
        tensors.push(Tensor::new(entry.shape.clone(), slice.to_vec()));
    }
    Ok((manifest, tensors))
}

/// Loads a checkpoint into `store`, checking names, shapes, and the config hash.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore, config_hash: &str) -> Result<CheckpointManifest> {
    let (manifest, tensors) = read_checkpoint(dir)?;
    if manifest.config_hash != config_hash {
        return Err(Error::Checkpoint(format!(
            "{}: config hash {} does not match model {}",
            dir.display(),
            manifest.config_hash,
            config_hash
        )));
    }
    for ((_, p), entry) in store.iter().zip(&manifest.arrays) {
        if p.name != entry.name {
            return Err(Error::Checkpoint(format!(
                "{}: expected array {}, found {}",
                dir.display(),
                p.name,
                entry.name
            )));
        }
    }
    store
        .load_snapshot(&tensors)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    Ok(manifest)
}
