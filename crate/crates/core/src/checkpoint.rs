//! On-disk checkpoints: a directory holding `model.safetensors` and
//! `manifest.json`.
//!
//! Tensor keys are `{group}.{param}` for weights and
//! `adam.{group}.m.{param}` / `adam.{group}.v.{param}` for optimizer
//! moments. The manifest carries the training config, iteration, seed,
//! RNG position and the SHA-256 of the tensor file, which is verified on
//! load.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use difadapt_nn::io::{from_bytes, to_bytes, TensorMap};
use difadapt_nn::{AdamW, ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const TENSOR_FILE: &str = "model.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).ctx(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Stable hash of any serializable value (its compact JSON encoding).
pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).ctx(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).ctx(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// What the checkpoint holds, e.g. `diffusion` or `restorer`.
    pub kind: String,
    pub iteration: u64,
    pub seed: u64,
    /// Position of the training RNG stream, for exact resumption.
    pub rng_word_pos: Option<u128>,
    pub config: serde_json::Value,
    pub tensor_sha256: String,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: TensorMap<f32>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_params(&mut self, group: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{group}.{name}"), t.clone());
        }
    }

    pub fn put_optimizer(&mut self, group: &str, store: &ParamStore<f32>, opt: &AdamW<f32>) {
        let (_, m, v) = opt.state();
        for ((name, _), (m, v)) in store.iter().zip(m.iter().zip(v)) {
            self.tensors.insert(format!("adam.{group}.m.{name}"), m.clone());
            self.tensors.insert(format!("adam.{group}.v.{name}"), v.clone());
        }
    }

    fn group(&self, prefix: &str) -> TensorMap<f32> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}.");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn load_params(&self, group: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let map = self.group(&format!("{group}."));
        store.load_map(&map)?;
        Ok(())
    }

    /// Restores optimizer moments; `steps` is the optimizer's step counter.
    pub fn load_optimizer(&self, group: &str, store: &ParamStore<f32>, opt: &mut AdamW<f32>, steps: u64) -> Result<()> {
        let m_map = self.group(&format!("adam.{group}.m."));
        let v_map = self.group(&format!("adam.{group}.v."));
        let pick = |map: &TensorMap<f32>| -> Result<Vec<Tensor<f32>>> {
            store
                .iter()
                .map(|(name, _)| {
                    map.get(name)
                        .cloned()
                        .ok_or_else(|| Error::Dataset(format!("checkpoint lacks optimizer state for `{name}`")))
                })
                .collect()
        };
        opt.restore(steps, pick(&m_map)?, pick(&v_map)?)?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, mut manifest: CheckpointManifest) -> Result<CheckpointManifest> {
        fs::create_dir_all(dir).ctx(|| format!("creating {}", dir.display()))?;
        let bytes = to_bytes(&self.tensors, &BTreeMap::new())?;
        manifest.tensor_sha256 = sha256_hex(&bytes);
        let path = dir.join(TENSOR_FILE);
        fs::write(&path, &bytes).ctx(|| format!("writing {}", path.display()))?;
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointManifest)> {
        let manifest: CheckpointManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let path = dir.join(TENSOR_FILE);
        let bytes = fs::read(&path).ctx(|| format!("reading {}", path.display()))?;
        if sha256_hex(&bytes) != manifest.tensor_sha256 {
            return Err(Error::Dataset(format!("{} does not match its manifest hash", path.display())));
        }
        let (tensors, _) = from_bytes(&bytes)?;
        Ok((Self { tensors }, manifest))
    }
}

/// `{dir}/iter_{n:07}` for periodic snapshots.
pub fn snapshot_dir(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("iter_{iteration:07}"))
}
