//! Checkpoint directories.
//!
//! A checkpoint is a directory with three files:
//!
//! * `model.cfg` — the [`ModelConfig`] as TOML key/value text,
//! * `manifest.json` — dtype plus one entry per parameter (name, shape, byte
//!   offset, byte length) in registry order,
//! * `params.bin` — every parameter as little-endian floats, concatenated.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::scalar::Scalar;

pub const CONFIG_FILE: &str = "model.cfg";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub total_bytes: usize,
    pub params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

pub fn save_checkpoint<S: Scalar>(model: &Seq2SeqModel<S>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.num_params() * S::BYTES);
    let mut entries = Vec::with_capacity(model.params().len());
    for (name, t) in model.params().iter() {
        let offset = blob.len();
        for &v in t.data() {
            v.write_le(&mut blob);
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: S::DTYPE.to_string(),
        total_bytes: blob.len(),
        params: entries,
    };
    fs::write(dir.join(CONFIG_FILE), model.config().to_toml())?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<Seq2SeqModel<S>> {
    let cfg_text = fs::read_to_string(dir.join(CONFIG_FILE))?;
    let config = ModelConfig::from_toml(&cfg_text)
        .map_err(|e| Error::Corrupt(format!("{CONFIG_FILE}: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Corrupt(format!("{MANIFEST_FILE}: {e}")))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;

    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.dtype != S::DTYPE {
        return Err(Error::Corrupt(format!("dtype {} does not match requested {}", manifest.dtype, S::DTYPE)));
    }
    if blob.len() != manifest.total_bytes {
        return Err(Error::Corrupt(format!(
            "{BLOB_FILE} holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.total_bytes
        )));
    }

    let mut model = Seq2SeqModel::<S>::zeroed(config)?;
    let mut seen = vec![false; model.params().len()];
    for e in &manifest.params {
        let id = model
            .params()
            .id(&e.name)
            .ok_or_else(|| Error::Corrupt(format!("unknown parameter `{}`", e.name)))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Corrupt(format!("parameter `{}` listed twice", e.name)));
        }
        let target = model.params_mut().get_mut(id);
        if target.shape() != e.shape.as_slice() {
            return Err(Error::Corrupt(format!(
                "parameter `{}` has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                target.shape()
            )));
        }
        if e.bytes != target.numel() * S::BYTES || e.offset.checked_add(e.bytes).is_none_or(|end| end > blob.len()) {
            return Err(Error::Corrupt(format!("parameter `{}` has an invalid byte range", e.name)));
        }
        for (dst, chunk) in target
            .data_mut()
            .iter_mut()
            .zip(blob[e.offset..e.offset + e.bytes].chunks_exact(S::BYTES))
        {
            *dst = S::read_le(chunk);
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let name = model.params().iter().nth(missing).map(|(n, _)| n.to_string()).unwrap_or_default();
        return Err(Error::Corrupt(format!("parameter `{name}` missing from manifest")));
    }
    Ok(model)
}
