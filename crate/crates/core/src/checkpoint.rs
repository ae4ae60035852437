//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u32` header length, a JSON
//! header (format version, iteration, config, random-stream state, tensor
//! index, optimizer step counts), then every indexed tensor as raw
//! little-endian `f32` in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::trainer::{RngState, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"USAADCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    iteration: u64,
    config: TrainConfig,
    rng: RngState,
    tensors: Vec<TensorEntry>,
    adam_steps: Vec<StepEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepEntry {
    name: String,
    steps: u64,
}

fn opt_tensors<'a>(
    trainer: &'a Trainer,
    group: &'a str,
    opt: &'a Adam<f32>,
) -> impl Iterator<Item = (String, &'a Tensor<f32>)> + 'a {
    opt.state().flat_map(move |(id, _, m, v)| {
        let name = trainer.nets.store.name(id);
        [(format!("{group}.m/{name}"), m), (format!("{group}.v/{name}"), v)]
    })
}

impl Trainer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.nets.store;
        let mut tensors: Vec<(String, &Tensor<f32>)> =
            store.ids().map(|id| (format!("param/{}", store.name(id)), store.get(id))).collect();
        tensors.extend(opt_tensors(self, "adam_g", &self.opt_g));
        tensors.extend(opt_tensors(self, "adam_d", &self.opt_d));
        for (slot, items) in self.pool.slots.iter().enumerate() {
            for (k, t) in items.iter().enumerate() {
                tensors.push((format!("pool/{slot}/{k}"), t));
            }
        }
        let adam_steps = [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)]
            .into_iter()
            .flat_map(|(g, opt)| {
                opt.state().map(move |(id, steps, _, _)| StepEntry { name: format!("{g}/{}", store.name(id)), steps })
            })
            .collect();
        let header = Header {
            version: FORMAT_VERSION,
            iteration: self.iteration,
            config: self.config.clone(),
            rng: self.rng_state(),
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
            adam_steps,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let payload: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported format version {}", header.version)));
        }
        let mut blob = &bytes[12 + hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 4).sum();
        if blob.len() != expected {
            return Err(Error::Corrupt(format!("payload is {} bytes, header describes {expected}", blob.len())));
        }
        let mut tensors = std::collections::HashMap::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let (chunk, rest) = blob.split_at(n * 4);
            blob = rest;
            let data = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            if tensors.insert(entry.name.as_str(), Tensor::new(&entry.shape, data)?).is_some() {
                return Err(Error::Corrupt(format!("duplicate tensor {}", entry.name)));
            }
        }

        let mut trainer = Trainer::new(header.config).map_err(|e| Error::Corrupt(format!("stored config: {e}")))?;
        trainer.iteration = header.iteration;
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = tensors.remove(name.as_str()).ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Corrupt(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let ids: Vec<_> = trainer.nets.store.ids().collect();
        for id in ids {
            let name = trainer.nets.store.name(id).to_string();
            let shape = trainer.nets.store.get(id).shape().to_vec();
            *trainer.nets.store.get_mut(id) = take(format!("param/{name}"), &shape)?;
        }
        let steps: std::collections::HashMap<&str, u64> =
            header.adam_steps.iter().map(|s| (s.name.as_str(), s.steps)).collect();
        for (group, opt) in [("adam_g", &mut trainer.opt_g), ("adam_d", &mut trainer.opt_d)] {
            let ids = opt.ids().to_vec();
            for (k, id) in ids.into_iter().enumerate() {
                let name = trainer.nets.store.name(id).to_string();
                let shape = trainer.nets.store.get(id).shape().to_vec();
                let m = take(format!("{group}.m/{name}"), &shape)?;
                let v = take(format!("{group}.v/{name}"), &shape)?;
                let s = *steps
                    .get(format!("{group}/{name}").as_str())
                    .ok_or_else(|| Error::Corrupt(format!("missing step count for {group}/{name}")))?;
                opt.set_state(k, s, m, v);
            }
        }
        for entry in &header.tensors {
            if let Some(rest) = entry.name.strip_prefix("pool/") {
                let slot: usize = rest
                    .split('/')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .filter(|&s| s < trainer.pool.slots.len())
                    .ok_or_else(|| Error::Corrupt(format!("bad pool entry {}", entry.name)))?;
                let t = take(entry.name.clone(), &entry.shape)?;
                trainer.pool.slots[slot].push(t);
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
        }
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
