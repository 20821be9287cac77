//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `OCPRCKPT`, a little-endian `u64` header length,
//! a JSON header, then every tensor as contiguous little-endian `f32` values.
//! The header's tensor directory gives each tensor's group (`param`,
//! `adam_m`, `adam_v`), name, shape, and element offset into the blob region.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datastore::VariableUniverse;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{ParamStore, Tensor};
use crate::trainer::{SubsetPolicy, TrainConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OCPRCKPT";

/// Training randomness is a pure function of the seed and epoch number, so
/// this pair fully determines the remaining random stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policy: SubsetPolicy,
    pub universe: VariableUniverse,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub rng: RngState,
    pub history: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    pub params: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    policy: SubsetPolicy,
    universe: VariableUniverse,
    epoch: usize,
    step: u64,
    rng: RngState,
    history: Vec<EpochRecord>,
    best_val: Option<f64>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    fn groups(&self) -> [&ParamStore<f32>; 3] {
        [&self.params, &self.adam_m, &self.adam_v]
    }

    /// Short content digest of the parameters, used as the model identity in reports.
    pub fn identity(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (group, store) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len(),
                });
                offset += t.len();
            }
        }
        let header = Header {
            schema_version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            policy: self.policy.clone(),
            universe: self.universe.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            history: self.history.clone(),
            best_val: self.best_val,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format {
            path: "<checkpoint>".into(),
            reason: e.to_string(),
        })?;
        let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for store in self.groups() {
            for (_, t) in store.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return Err(bad("truncated header"));
        }
        let value: serde_json::Value =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(&format!("corrupt header: {e}")))?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| bad("header lacks schema_version"))?;
        if found != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: found as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_value(value).map_err(|e| bad(&format!("corrupt header: {e}")))?;
        let blob = &body[header_len..];
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        if blob.len() != total * 4 {
            return Err(bad(&format!(
                "tensor data holds {} bytes, directory expects {}",
                blob.len(),
                total * 4
            )));
        }
        let mut stores = [ParamStore::new(), ParamStore::new(), ParamStore::new()];
        for entry in &header.tensors {
            let gi = GROUPS
                .iter()
                .position(|g| *g == entry.group)
                .ok_or_else(|| bad(&format!("unknown tensor group {:?}", entry.group)))?;
            if entry.shape.iter().product::<usize>() != entry.len || entry.offset + entry.len > total {
                return Err(bad(&format!("inconsistent directory entry for {}", entry.name)));
            }
            let data = blob[entry.offset * 4..(entry.offset + entry.len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if stores[gi].contains(&entry.name) {
                return Err(bad(&format!("duplicate tensor {}", entry.name)));
            }
            stores[gi].insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data)?);
        }
        let [params, adam_m, adam_v] = stores;
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            policy: header.policy,
            universe: header.universe,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            history: header.history,
            best_val: header.best_val,
            params,
            adam_m,
            adam_v,
        })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.partial");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
