//! Checkpoints: one RMTT file per named tensor plus `meta.json`.
//!
//! ```text
//! ckpt/
//!   meta.json            model config, training counters, name → file map
//!   params/<name>.rmtt
//!   momentum/<name>.rmtt  (training checkpoints only)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rmtt;
use crate::rmvit::RmvitConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: RmvitConfig,
    /// The frozen encoder the embeddings came from.
    #[serde(default)]
    pub encoder: Option<EncoderSpec>,
    pub encoder_fingerprint: String,
    pub epoch: usize,
    pub step: u64,
    pub best_loss: Option<f64>,
    pub params: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub momentum: BTreeMap<String, PathBuf>,
    /// Free-form extras (e.g. the training config) for provenance.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub momentum: Option<ParamStore>,
}

fn save_store(dir: &Path, sub: &str, store: &ParamStore) -> Result<BTreeMap<String, PathBuf>> {
    fs::create_dir_all(dir.join(sub))?;
    let mut map = BTreeMap::new();
    for (name, t) in store.iter() {
        if name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(Error::Invalid(format!("parameter name `{name}` is not a safe file name")));
        }
        let rel = PathBuf::from(sub).join(format!("{name}.rmtt"));
        rmtt::write(&dir.join(&rel), t)?;
        map.insert(name.clone(), rel);
    }
    Ok(map)
}

fn load_store(dir: &Path, map: &BTreeMap<String, PathBuf>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, rel) in map {
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(Error::Invalid(format!("checkpoint path {} escapes the checkpoint", rel.display())));
        }
        store.insert(name.clone(), rmtt::read(&dir.join(rel))?);
    }
    Ok(store)
}

/// Writes into a sibling temp directory, then swaps it into place.
pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let mut meta = ck.meta.clone();
    meta.params = save_store(&tmp, "params", &ck.params)?;
    meta.momentum = match &ck.momentum {
        Some(m) => save_store(&tmp, "momentum", m)?,
        None => BTreeMap::new(),
    };
    fs::write(tmp.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::MissingFile(meta_path));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
    meta.model.validate()?;
    let params = load_store(dir, &meta.params)?;
    let momentum = if meta.momentum.is_empty() { None } else { Some(load_store(dir, &meta.momentum)?) };
    Ok(Checkpoint { meta, params, momentum })
}
