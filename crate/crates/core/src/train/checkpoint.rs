use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ResNetIbn};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::trainer::EpochMetrics;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "coverid-checkpoint";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    metrics: Option<EpochMetrics>,
    /// Adam step count shared by all parameters; absent without optimizer state.
    adam_steps: Option<u64>,
    params: IndexMap<String, TensorEntry>,
}

/// A model snapshot with the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ResNetIbn<f32>,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub metrics: Option<EpochMetrics>,
}

struct Blob {
    table: IndexMap<String, TensorEntry>,
    bytes: Vec<u8>,
}

impl Blob {
    fn push(&mut self, name: String, shape: &[usize], values: &[f32]) {
        let offset = self.bytes.len() as u64;
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.table.insert(
            name,
            TensorEntry {
                shape: shape.to_vec(),
                byte_offset: offset,
                byte_len: 4 * values.len() as u64,
            },
        );
    }
}

fn running_key(layer: &str, which: &str) -> String {
    format!("running.{layer}.{which}")
}

impl Checkpoint {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Blob {
            table: IndexMap::new(),
            bytes: Vec::new(),
        };
        let store = self.model.params();
        for (name, p) in store.iter() {
            blob.push(name.to_string(), p.value.shape(), p.value.data());
        }
        for (name, stats) in self.model.running_stats() {
            let c = stats.mean.len();
            blob.push(running_key(name, "mean"), &[c], &stats.mean);
            blob.push(running_key(name, "var"), &[c], &stats.var);
        }
        let steps: Vec<u64> = store.iter().map(|(_, p)| p.step_count).collect();
        let adam_steps = steps.first().copied();
        if steps.iter().any(|&s| Some(s) != adam_steps) {
            return Err(Error::InvalidArgument(
                "parameters disagree on the optimizer step count".into(),
            ));
        }
        for (name, p) in store.iter() {
            blob.push(format!("adam_m.{name}"), p.adam_m.shape(), p.adam_m.data());
            blob.push(format!("adam_v.{name}"), p.adam_v.shape(), p.adam_v.data());
        }
        let manifest = Manifest {
            format: FORMAT_TAG.into(),
            format_version: FORMAT_VERSION,
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            adam_steps,
            params: blob.table,
        };
        let mut json = serde_json::to_vec_pretty(&manifest)?;
        json.push(b'\n');
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        let ppath = dir.join(PARAMS_FILE);
        fs::write(&ppath, blob.bytes).map_err(|e| Error::io(&ppath, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::NotFound(dir.to_path_buf()));
        }
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let header: serde_json::Value = serde_json::from_slice(&text)
            .map_err(|e| Error::malformed("checkpoint manifest", e.to_string()))?;
        if header.get("format").and_then(|v| v.as_str()) != Some(FORMAT_TAG) {
            return Err(Error::malformed(
                "checkpoint manifest",
                "missing format tag",
            ));
        }
        let found = header
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::malformed("checkpoint manifest", "missing format_version"))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::Version {
                what: "checkpoint",
                expected: FORMAT_VERSION,
                found: found.min(u32::MAX as u64) as u32,
            });
        }
        let manifest: Manifest = serde_json::from_value(header)
            .map_err(|e| Error::malformed("checkpoint manifest", e.to_string()))?;
        let ppath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;

        let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let entry = manifest
                .params
                .get(name)
                .ok_or_else(|| Error::malformed("checkpoint", format!("missing tensor {name}")))?;
            if entry.shape != shape {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name}: stored {:?}, model expects {shape:?}",
                    entry.shape
                )));
            }
            let n: usize = shape.iter().product();
            let end = entry.byte_offset.checked_add(entry.byte_len);
            if entry.byte_len != 4 * n as u64 || end.is_none_or(|e| e > bytes.len() as u64) {
                return Err(Error::malformed(
                    "checkpoint",
                    format!("tensor {name} lies outside {PARAMS_FILE} or has the wrong length"),
                ));
            }
            let start = entry.byte_offset as usize;
            Ok(bytes[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };

        let mut model = ResNetIbn::<f32>::new(manifest.model_config.clone(), 0)?;
        let mut expected = 0usize;
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let name = model.params().name(id).to_string();
            let shape = model.params().value(id).shape().to_vec();
            let value = read(&name, &shape)?;
            let m = manifest
                .adam_steps
                .map(|_| read(&format!("adam_m.{name}"), &shape));
            let v = manifest
                .adam_steps
                .map(|_| read(&format!("adam_v.{name}"), &shape));
            let p = model.params_mut().get_mut(id);
            p.value = Tensor::new(shape.clone(), value)?;
            if let (Some(m), Some(v)) = (m, v) {
                p.adam_m = Tensor::new(shape.clone(), m?)?;
                p.adam_v = Tensor::new(shape.clone(), v?)?;
                p.step_count = manifest.adam_steps.unwrap_or(0);
                expected += 2;
            }
            expected += 1;
        }
        for (name, stats) in model.running_stats_mut() {
            let c = stats.mean.len();
            stats.mean = read(&running_key(name, "mean"), &[c])?;
            stats.var = read(&running_key(name, "var"), &[c])?;
            expected += 2;
        }
        if expected != manifest.params.len() {
            return Err(Error::malformed(
                "checkpoint",
                format!(
                    "table has {} tensors, model accounts for {expected}",
                    manifest.params.len()
                ),
            ));
        }
        let total: u64 = manifest.params.values().map(|e| e.byte_len).sum();
        if total != bytes.len() as u64 {
            return Err(Error::malformed(
                "checkpoint",
                format!(
                    "{PARAMS_FILE} holds {} bytes, table describes {total}",
                    bytes.len()
                ),
            ));
        }
        Ok(Self {
            model,
            train_config: manifest.train_config,
            epoch: manifest.epoch,
            metrics: manifest.metrics,
        })
    }
}
