//! Binary checkpoints.
//!
//! Layout: `b"GTRN"`, format version (u32 LE), header length (u64 LE), JSON
//! header, f32 LE payload, CRC32 of the payload (u32 LE). The header holds
//! the model config, optimizer scalars, optional vocabulary and a tensor index
//! (name, shape, offset in elements). Adam moments are stored as
//! `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 4] = b"GTRN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    epoch: usize,
    seed: u64,
    best_valid: Option<f64>,
    vocab: Option<Vocabulary>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub state: TrainState<f32>,
    pub vocab: Option<Vocabulary>,
}

impl Checkpoint {
    /// Errors unless `expected` describes the same architecture (dropout may differ).
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let got = self.model.config();
        let mut a = serde_json::to_value(got)?;
        let mut b = serde_json::to_value(expected)?;
        let (Some(a), Some(b)) = (a.as_object_mut(), b.as_object_mut()) else {
            unreachable!("configs serialize to objects");
        };
        let diffs: Vec<String> = a
            .iter()
            .filter(|(k, v)| k.as_str() != "dropout" && b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, expected {}", b[k]))
            .collect();
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::Incompatible(diffs.join(", ")).into())
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, state: &TrainState<f32>, vocab: Option<&Vocabulary>) -> Result<()> {
    fs::write(path, encode(model, state, vocab)?)?;
    Ok(())
}

pub fn encode(model: &Model<f32>, state: &TrainState<f32>, vocab: Option<&Vocabulary>) -> Result<Vec<u8>> {
    let store = model.store();
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Parameter("optimizer state does not match the model".into()));
    }
    let mut tensors = Vec::with_capacity(3 * store.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, t: &Tensor<f32>| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (id, p) in store.iter() {
        push(p.name.clone(), &p.value);
        push(format!("adam.m.{}", p.name), &state.m[id.0]);
        push(format!("adam.v.{}", p.name), &state.v[id.0]);
    }
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        step: state.step,
        epoch: state.epoch,
        seed: state.seed,
        best_valid: state.best_valid,
        vocab: vocab.cloned(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &'static str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(CheckpointError::Truncated(what).into());
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<Checkpoint> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(take(b, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Truncated("header"))?;
    let header: Header = serde_json::from_slice(take(b, header_len, "header")?)
        .map_err(|e| CheckpointError::Incompatible(format!("unreadable header: {e}")))?;
    if b.len() < 4 {
        return Err(CheckpointError::Truncated("payload").into());
    }
    let (payload, crc) = b.split_at(b.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    let expected_len: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>() * 4;
    if payload.len() < expected_len {
        return Err(CheckpointError::Truncated("payload").into());
    }
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let mut model = Model::<f32>::build(header.config.clone(), 0)
        .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    let read = |entry: &TensorEntry| -> Result<Tensor<f32>> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset * 4;
        let raw = payload
            .get(start..start + n * 4)
            .ok_or(CheckpointError::Truncated("tensor data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(entry.shape.clone(), data).map_err(|e| CheckpointError::Incompatible(e.to_string()).into())
    };
    let index: std::collections::HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let lookup = |name: &str| -> Result<Tensor<f32>> {
        let entry = index
            .get(name)
            .ok_or_else(|| CheckpointError::Incompatible(format!("missing tensor `{name}`")))?;
        read(entry)
    };
    let names: Vec<String> = model.store().iter().map(|(_, p)| p.name.clone()).collect();
    if header.tensors.len() != 3 * names.len() {
        return Err(CheckpointError::Incompatible(format!(
            "{} tensors stored, model needs {}",
            header.tensors.len(),
            3 * names.len()
        ))
        .into());
    }
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let value = lookup(name)?;
        let id = crate::tensor::ParamId(i);
        if value.shape() != model.store().get(id).value.shape() {
            return Err(CheckpointError::Incompatible(format!(
                "tensor `{name}` has shape {:?}, model expects {:?}",
                value.shape(),
                model.store().get(id).value.shape()
            ))
            .into());
        }
        model.store_mut().set_value(id, value)?;
        let mt = lookup(&format!("adam.m.{name}"))?;
        let vt = lookup(&format!("adam.v.{name}"))?;
        if mt.shape() != model.store().get(id).value.shape() || vt.shape() != mt.shape() {
            return Err(CheckpointError::Incompatible(format!("optimizer moments for `{name}` mis-shaped")).into());
        }
        m.push(mt);
        v.push(vt);
    }
    Ok(Checkpoint {
        model,
        state: TrainState {
            step: header.step,
            epoch: header.epoch,
            m,
            v,
            seed: header.seed,
            best_valid: header.best_valid,
        },
        vocab: header.vocab,
    })
}
