//! Parameter persistence: a JSON manifest next to a blob of little-endian
//! `f32` values in manifest order. Values are widened back to `f64` on load.
//! Adam moments, when present, live in a second blob with its own hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorConfig, MiEstimator};
use crate::mdm::{Mdm, ModelConfig};
use crate::nn::{ParamStore, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

pub const KIND_MDM: &str = "mdm";
pub const KIND_ESTIMATOR: &str = "mi_estimator";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    /// SHA-256 of the parameter blob, hex.
    pub content_hash: String,
    /// Seeds that produced these weights, oldest first.
    pub seed_lineage: Vec<u64>,
    /// Optimizer step counter.
    pub step: u64,
    pub optimizer_hash: Option<String>,
    /// Free-form provenance, e.g. the backbone hash an estimator was fit on.
    pub extra: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_f32(values: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect()
}

/// Parameter blob of `store` in id order.
pub fn params_blob(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * store.num_scalars());
    for id in store.ids() {
        encode_f32(store.value(id).data().iter().copied(), &mut out);
    }
    out
}

fn optimizer_blob(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * store.num_scalars());
    for id in store.ids() {
        encode_f32(store.moments(id).0.iter().copied(), &mut out);
    }
    for id in store.ids() {
        encode_f32(store.moments(id).1.iter().copied(), &mut out);
    }
    out
}

/// Writes `dir/manifest.json`, `dir/params.bin` and, with `with_optimizer`,
/// `dir/optimizer.bin`. Returns the manifest.
pub fn save_store(
    dir: &Path,
    kind: &str,
    config: &impl Serialize,
    store: &ParamStore,
    seed_lineage: &[u64],
    extra: BTreeMap<String, String>,
    with_optimizer: bool,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let blob = params_blob(store);
    let optimizer = with_optimizer.then(|| optimizer_blob(store));
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        params: store
            .ids()
            .map(|id| ParamEntry {
                name: store.name(id).to_string(),
                shape: store.value(id).shape().to_vec(),
            })
            .collect(),
        content_hash: sha256_hex(&blob),
        seed_lineage: seed_lineage.to_vec(),
        step: store.step(),
        optimizer_hash: optimizer.as_deref().map(sha256_hex),
        extra,
    };
    std::fs::write(dir.join(PARAMS_FILE), &blob)?;
    match &optimizer {
        Some(o) => std::fs::write(dir.join(OPTIMIZER_FILE), o)?,
        None => {
            if dir.join(OPTIMIZER_FILE).exists() {
                std::fs::remove_file(dir.join(OPTIMIZER_FILE))?;
            }
        }
    }
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads and verifies a checkpoint written by [`save_store`].
pub fn load_store(dir: &Path) -> Result<(Manifest, ParamStore)> {
    let manifest = read_manifest(dir)?;
    let blob = std::fs::read(dir.join(PARAMS_FILE))?;
    let sizes: Vec<usize> = manifest.params.iter().map(|p| p.shape.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    if blob.len() != 4 * total {
        return Err(Error::Format(format!(
            "parameter blob is {} bytes, manifest needs {}",
            blob.len(),
            4 * total
        )));
    }
    if sha256_hex(&blob) != manifest.content_hash {
        return Err(Error::Format("parameter blob hash does not match the manifest".into()));
    }
    let values = decode_f32(&blob);
    let mut store = ParamStore::new();
    let mut offset = 0;
    for (entry, &size) in manifest.params.iter().zip(&sizes) {
        let data = values[offset..offset + size].to_vec();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        offset += size;
    }
    store.set_step(manifest.step);
    if let Some(hash) = &manifest.optimizer_hash {
        let opt = std::fs::read(dir.join(OPTIMIZER_FILE))?;
        if opt.len() != 8 * total || &sha256_hex(&opt) != hash {
            return Err(Error::Format("optimizer blob does not match the manifest".into()));
        }
        let moments = decode_f32(&opt);
        let (first, second) = moments.split_at(total);
        let ids: Vec<_> = store.ids().collect();
        let mut offset = 0;
        for (id, &size) in ids.into_iter().zip(&sizes) {
            store.set_moments(
                id,
                first[offset..offset + size].to_vec(),
                second[offset..offset + size].to_vec(),
            )?;
            offset += size;
        }
    }
    Ok((manifest, store))
}

fn expect_kind(manifest: &Manifest, kind: &str) -> Result<()> {
    if manifest.kind != kind {
        return Err(Error::Format(format!(
            "checkpoint holds a {:?}, expected {kind:?}",
            manifest.kind
        )));
    }
    Ok(())
}

pub fn save_mdm(dir: &Path, model: &Mdm, seed_lineage: &[u64]) -> Result<Manifest> {
    save_store(
        dir,
        KIND_MDM,
        model.config(),
        model.params(),
        seed_lineage,
        BTreeMap::new(),
        true,
    )
}

pub fn load_mdm(dir: &Path) -> Result<(Mdm, Manifest)> {
    let (manifest, store) = load_store(dir)?;
    expect_kind(&manifest, KIND_MDM)?;
    let config: ModelConfig =
        serde_json::from_value(manifest.config.clone()).map_err(|e| Error::Format(format!("model config: {e}")))?;
    Ok((Mdm::from_store(config, store)?, manifest))
}

/// Manifest key recording which backbone an estimator was trained on.
pub const BACKBONE_HASH_KEY: &str = "backbone_hash";

pub fn save_estimator(dir: &Path, head: &MiEstimator, backbone_hash: &str, seed_lineage: &[u64]) -> Result<Manifest> {
    let extra = BTreeMap::from([(BACKBONE_HASH_KEY.to_string(), backbone_hash.to_string())]);
    save_store(
        dir,
        KIND_ESTIMATOR,
        head.config(),
        head.params(),
        seed_lineage,
        extra,
        false,
    )
}

pub fn load_estimator(dir: &Path) -> Result<(MiEstimator, Manifest)> {
    let (manifest, store) = load_store(dir)?;
    expect_kind(&manifest, KIND_ESTIMATOR)?;
    let config: EstimatorConfig =
        serde_json::from_value(manifest.config.clone()).map_err(|e| Error::Format(format!("estimator config: {e}")))?;
    Ok((MiEstimator::from_store(config, store)?, manifest))
}
