//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header (model kind and
//! config, seed, tensor names and shapes), then every tensor as f64 LE in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csmnet::{CsmConfig, CsmNet};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::sttf::{HeadKind, ModelConfig, SttfModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DYSYNC01";

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Tfn(SttfModel),
    Csm(CsmNet),
}

impl SavedModel {
    pub fn params(&self) -> &ParamStore {
        match self {
            SavedModel::Tfn(m) => &m.params,
            SavedModel::Csm(m) => &m.params,
        }
    }

    pub fn head(&self) -> HeadKind {
        match self {
            SavedModel::Tfn(m) => m.config.head,
            SavedModel::Csm(m) => m.config.head,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
enum ModelSpec {
    Tfn(ModelConfig),
    Csm(CsmConfig),
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    seed: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn encode(model: &SavedModel) -> Result<Vec<u8>> {
    let params = model.params();
    let header = Header {
        model: match model {
            SavedModel::Tfn(m) => ModelSpec::Tfn(m.config.clone()),
            SavedModel::Csm(m) => ModelSpec::Csm(m.config.clone()),
        },
        seed: params.seed(),
        tensors: params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<SavedModel> {
    let corrupt = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut blob = bytes[16 + hlen..].chunks_exact(8);
    let mut params = ParamStore::new(header.seed);
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = blob
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.len() != n {
            return Err(corrupt("truncated tensor data"));
        }
        params.insert(&name, Tensor::new(shape, data)?);
    }
    if blob.next().is_some() || !blob.remainder().is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let fresh = match header.model {
        ModelSpec::Tfn(cfg) => SavedModel::Tfn(SttfModel::new(cfg, header.seed).map_err(|e| corrupt(&e.to_string()))?),
        ModelSpec::Csm(cfg) => SavedModel::Csm(CsmNet::new(cfg, header.seed).map_err(|e| corrupt(&e.to_string()))?),
    };
    let expected: Vec<(&str, &[usize])> = fresh.params().iter().map(|(n, t)| (n, t.shape())).collect();
    let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
    if expected != got {
        return Err(corrupt("tensor set does not match the model config"));
    }
    Ok(match fresh {
        SavedModel::Tfn(m) => SavedModel::Tfn(SttfModel { params, ..m }),
        SavedModel::Csm(m) => SavedModel::Csm(CsmNet { params, ..m }),
    })
}

pub fn save(path: &Path, model: &SavedModel) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SavedModel> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
