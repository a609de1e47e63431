//! Checkpoint directories: `manifest.json` plus `tensors.bin`.
//!
//! `tensors.bin` is a sequence of named arrays, each with a shape header and
//! little-endian 32-bit floats. It carries the trainable parameters, the
//! batch-norm running statistics (`buffer.*`) and the Adam moments
//! (`adam.m.*`, `adam.v.*`). The generator state needs no payload: every
//! stream is derived from `(seed, epoch)`, both stored in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::BatchNormState;
use crate::config::ModelConfig;
use crate::error::{KgeError, Result};
use crate::model::{Buffers, Model};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Trainer;

pub const FORMAT: &str = "kgattn-checkpoint/1";
pub const INIT_SCHEME: &str =
    "xavier-uniform (embeddings, projections, ffn); uniform(-1,1) tucker core; norm gamma=1 beta=0; biases 0";
const MAGIC: &[u8; 8] = b"KGATTN\x00\x01";
const MANIFEST: &str = "manifest.json";
const TENSORS: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamRecord {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Completed epochs; training resumes at this zero-based epoch.
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: ModelConfig,
    pub dataset_checksum: Option<String>,
    pub init: String,
    pub entities: usize,
    /// Rows of the relation table (original plus inverse).
    pub relation_rows: usize,
    pub decoder: String,
    pub tucker_core_shape: Option<Vec<usize>>,
    pub adam: AdamRecord,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| KgeError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn buffer_tensors<T: Scalar>(buffers: &Buffers<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    let mut push = |prefix: &str, state: &BatchNormState<T>| {
        let d = state.running_mean.len();
        out.push((format!("{prefix}.running_mean"), Tensor::new(vec![d], state.running_mean.clone()).expect("shape")));
        out.push((format!("{prefix}.running_var"), Tensor::new(vec![d], state.running_var.clone()).expect("shape")));
    };
    push("buffer.encoder.entity_bn", &buffers.encoder.entity_bn);
    push("buffer.encoder.relation_bn", &buffers.encoder.relation_bn);
    if let Some(state) = &buffers.tucker_bn {
        push("buffer.decoder.tucker.bn", state);
    }
    out
}

/// Writes a checkpoint of `trainer` into `dir` (created if needed).
pub fn save<T: Scalar>(dir: &Path, trainer: &Trainer<T>, dataset_checksum: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| KgeError::io(dir, e))?;
    let model = &trainer.model;
    let mut named: Vec<(String, &[usize], &[T])> = Vec::new();
    for (name, t) in model.store.names().iter().zip(model.store.tensors()) {
        named.push((name.clone(), t.shape(), t.data()));
    }
    let buffers = buffer_tensors(&model.buffers);
    for (name, t) in &buffers {
        named.push((name.clone(), t.shape(), t.data()));
    }
    for (kind, moments) in [("m", &trainer.adam.first), ("v", &trainer.adam.second)] {
        for ((name, t), m) in model.store.names().iter().zip(model.store.tensors()).zip(moments) {
            named.push((format!("adam.{kind}.{name}"), t.shape(), m.as_slice()));
        }
    }

    let mut bin = Vec::new();
    bin.extend_from_slice(MAGIC);
    bin.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, shape, data) in &named {
        bin.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bin.extend_from_slice(name.as_bytes());
        bin.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &s in *shape {
            bin.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for &x in *data {
            bin.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
        }
    }
    let bin_path = dir.join(TENSORS);
    fs::write(&bin_path, bin).map_err(|e| KgeError::io(&bin_path, e))?;

    let config = &trainer.config;
    let AdamConfig { beta1, beta2, eps } = trainer.adam.config;
    let manifest = Manifest {
        format: FORMAT.into(),
        epoch: trainer.epoch,
        seed: config.seed,
        config_hash: config.hash(),
        config: config.clone(),
        dataset_checksum: dataset_checksum.map(str::to_owned),
        init: INIT_SCHEME.into(),
        entities: model.num_entities(),
        relation_rows: model.num_relations(),
        decoder: config.decoder.to_string(),
        tucker_core_shape: model.decoder.core.map(|id| model.store.get(id).shape().to_vec()),
        adam: AdamRecord {
            step: trainer.adam.step,
            beta1,
            beta2,
            eps,
        },
        tensors: named
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.to_vec(),
            })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| KgeError::io(&path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KgeError::Checkpoint("truncated tensor file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads every named array in `tensors.bin`, in file order.
pub fn read_tensors<T: Scalar>(dir: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let path = dir.join(TENSORS);
    let bytes = fs::read(&path).map_err(|e| KgeError::io(&path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(KgeError::Checkpoint(format!("{} is not a tensor file", path.display())));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| KgeError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| KgeError::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(KgeError::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Restores a trainer (model, buffers, optimizer, epoch) from `dir`.
///
/// Fails with a hash mismatch if the stored config no longer hashes to the
/// recorded value.
pub fn load<T: Scalar>(dir: &Path) -> Result<Trainer<T>> {
    let manifest = Manifest::read(dir)?;
    if manifest.format != FORMAT {
        return Err(KgeError::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    let found = manifest.config.hash();
    if found != manifest.config_hash {
        return Err(KgeError::HashMismatch {
            what: "config",
            expected: manifest.config_hash.clone(),
            found,
        });
    }
    let config = manifest.config.clone();
    config.validate()?;
    let tensors = read_tensors::<T>(dir)?;
    let entries: Vec<TensorEntry> = tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    if entries != manifest.tensors {
        return Err(KgeError::Checkpoint("tensor file does not match the manifest listing".into()));
    }

    let mut store = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut buffers = Vec::new();
    let mut moments = std::collections::HashMap::new();
    for (name, t) in tensors {
        if name.starts_with("buffer.") {
            buffers.push((name, t));
        } else if let Some(rest) = name.strip_prefix("adam.") {
            moments.insert(rest.to_owned(), t.into_data());
        } else {
            store.add(name, t);
        }
    }
    for name in store.names() {
        let take = |kind: &str, moments: &mut std::collections::HashMap<String, Vec<T>>| {
            moments
                .remove(&format!("{kind}.{name}"))
                .ok_or_else(|| KgeError::Checkpoint(format!("missing adam.{kind}.{name}")))
        };
        first.push(take("m", &mut moments)?);
        second.push(take("v", &mut moments)?);
    }
    if let Some(extra) = moments.keys().next() {
        return Err(KgeError::Checkpoint(format!("unexpected tensor adam.{extra}")));
    }

    let d = config.d;
    let bn = |prefix: &str| -> Result<Option<BatchNormState<T>>> {
        let find = |suffix: &str| {
            buffers
                .iter()
                .find(|(n, _)| n == &format!("{prefix}.{suffix}"))
                .map(|(_, t)| t.data().to_vec())
        };
        Ok(match (find("running_mean"), find("running_var")) {
            (Some(mean), Some(var)) if mean.len() == d && var.len() == d => {
                let mut state = BatchNormState::new(d);
                state.running_mean = mean;
                state.running_var = var;
                Some(state)
            }
            (None, None) => None,
            _ => return Err(KgeError::Checkpoint(format!("malformed buffers under {prefix}"))),
        })
    };
    let missing = |p: &str| KgeError::Checkpoint(format!("missing buffers {p}"));
    let mut model_buffers = Buffers {
        encoder: crate::encoder::EncoderBuffers::new(d),
        tucker_bn: bn("buffer.decoder.tucker.bn")?,
    };
    model_buffers.encoder.entity_bn =
        bn("buffer.encoder.entity_bn")?.ok_or_else(|| missing("buffer.encoder.entity_bn"))?;
    model_buffers.encoder.relation_bn =
        bn("buffer.encoder.relation_bn")?.ok_or_else(|| missing("buffer.encoder.relation_bn"))?;

    let model = Model::from_parts(&config, store, model_buffers)?;
    if model.decoder.input_bn.is_some() != model.buffers.tucker_bn.is_some() {
        return Err(KgeError::Checkpoint("tucker batch-norm buffers do not match the config".into()));
    }
    let adam = AdamState {
        config: AdamConfig {
            beta1: manifest.adam.beta1,
            beta2: manifest.adam.beta2,
            eps: manifest.adam.eps,
        },
        step: manifest.adam.step,
        first,
        second,
    };
    Ok(Trainer::from_parts(config, model, adam, manifest.epoch))
}
