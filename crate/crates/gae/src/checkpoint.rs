//! Checkpoint persistence: parameter stores, optimizer moments, and EMA
//! shadows as safetensors files next to a JSON meta record carrying the
//! config snapshot, step counters, and content hashes. Loads verify the
//! hashes, so a reloaded checkpoint either reproduces the saved state
//! bitwise or fails loudly.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};

use crate::error::{GaeError, Result};
use crate::nn::{hash_named_tensors, AdamW, ParamStore};

/// Sidecar record stored as `meta.json` inside each checkpoint directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    /// What the checkpoint holds, e.g. "autoencoder" or "diffusion".
    pub kind: String,
    pub step: usize,
    pub epoch: usize,
    /// Content hash per saved tensor group, keyed by group name.
    pub hashes: BTreeMap<String, String>,
    /// Optimizer step counts, keyed by optimizer name.
    pub optimizer_steps: BTreeMap<String, usize>,
    /// Config snapshot of the run that produced this checkpoint.
    pub config: serde_json::Value,
}

/// Everything one checkpoint persists. Groups are written as
/// `<name>.safetensors`; optimizers as `opt_<name>.safetensors`.
pub struct Snapshot<'a> {
    pub kind: &'a str,
    pub step: usize,
    pub epoch: usize,
    pub config: serde_json::Value,
    pub stores: Vec<(String, &'a ParamStore)>,
    pub optimizers: Vec<(String, &'a AdamW)>,
    /// Extra named-tensor groups, e.g. the EMA shadow.
    pub tensor_groups: Vec<(String, Vec<(String, Tensor)>)>,
}

fn meta_path(dir: &Path) -> PathBuf {
    dir.join("meta.json")
}

fn group_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.safetensors"))
}

fn opt_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("opt_{name}.safetensors"))
}

fn write_tensors(path: &Path, named: &[(String, Tensor)]) -> Result<()> {
    let map: HashMap<String, Tensor> =
        named.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

/// Write a checkpoint directory `step_<N>` under `root` and return its path.
pub fn save_snapshot(root: &Path, snap: &Snapshot) -> Result<PathBuf> {
    let dir = root.join(format!("step_{:08}", snap.step));
    std::fs::create_dir_all(&dir).map_err(|e| GaeError::io(&dir, e))?;
    let mut hashes = BTreeMap::new();
    for (name, store) in &snap.stores {
        store.save(&group_path(&dir, name))?;
        hashes.insert(name.clone(), store.content_hash()?);
    }
    for (name, group) in &snap.tensor_groups {
        write_tensors(&group_path(&dir, name), group)?;
        hashes.insert(name.clone(), hash_named_tensors(group)?);
    }
    let mut optimizer_steps = BTreeMap::new();
    for (name, opt) in &snap.optimizers {
        write_tensors(&opt_path(&dir, name), &opt.state_tensors())?;
        optimizer_steps.insert(name.clone(), opt.step_count());
    }
    let meta = CheckpointMeta {
        kind: snap.kind.to_string(),
        step: snap.step,
        epoch: snap.epoch,
        hashes,
        optimizer_steps,
        config: snap.config.clone(),
    };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| GaeError::Checkpoint(format!("meta encode: {e}")))?;
    let path = meta_path(&dir);
    std::fs::write(&path, text).map_err(|e| GaeError::io(&path, e))?;
    Ok(dir)
}

/// Read and parse `meta.json` from a checkpoint directory.
pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = meta_path(dir);
    let text = std::fs::read_to_string(&path).map_err(|e| GaeError::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| GaeError::Checkpoint(format!("bad meta in {}: {e}", dir.display())))
}

/// Load a parameter group into an already-built store and verify its
/// content hash against the meta record.
pub fn load_store(dir: &Path, name: &str, store: &mut ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let expected = meta.hashes.get(name).ok_or_else(|| {
        GaeError::Checkpoint(format!("meta in {} lists no group '{name}'", dir.display()))
    })?;
    store.load(&group_path(dir, name))?;
    let got = store.content_hash()?;
    if &got != expected {
        return Err(GaeError::Checkpoint(format!(
            "content hash mismatch for '{name}' in {}: expected {expected}, got {got}",
            dir.display()
        )));
    }
    Ok(())
}

/// Load a raw tensor group (e.g. an EMA shadow) and verify its hash.
pub fn load_tensor_group(
    dir: &Path,
    name: &str,
    meta: &CheckpointMeta,
    device: &Device,
) -> Result<HashMap<String, Tensor>> {
    let expected = meta.hashes.get(name).ok_or_else(|| {
        GaeError::Checkpoint(format!("meta in {} lists no group '{name}'", dir.display()))
    })?;
    let map = candle_core::safetensors::load(group_path(dir, name), device)?;
    let mut named: Vec<(String, Tensor)> = map.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let got = hash_named_tensors(&named)?;
    if &got != expected {
        return Err(GaeError::Checkpoint(format!(
            "content hash mismatch for '{name}' in {}: expected {expected}, got {got}",
            dir.display()
        )));
    }
    Ok(map)
}

/// Restore optimizer moments saved under `name`.
pub fn load_optimizer(
    dir: &Path,
    name: &str,
    opt: &mut AdamW,
    meta: &CheckpointMeta,
    device: &Device,
) -> Result<()> {
    let step = *meta.optimizer_steps.get(name).ok_or_else(|| {
        GaeError::Checkpoint(format!("meta in {} lists no optimizer '{name}'", dir.display()))
    })?;
    let state = candle_core::safetensors::load(opt_path(dir, name), device)?;
    opt.load_state(&state, step)
}

/// The checkpoint directory with the highest step under `root`, if any.
pub fn latest(root: &Path) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = std::fs::read_dir(root).map_err(|e| GaeError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| GaeError::io(root, e))?;
        let fname = entry.file_name();
        let Some(step_str) = fname.to_string_lossy().strip_prefix("step_").map(String::from)
        else {
            continue;
        };
        let Ok(step) = step_str.parse::<usize>() else {
            continue;
        };
        if !meta_path(&entry.path()).exists() {
            continue;
        }
        if best.as_ref().map(|(s, _)| step > *s).unwrap_or(true) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}
