//! Binary checkpoint archive.
//!
//! Layout (all integers little-endian `u32`): magic `AFAC`, format version, header length and
//! JSON header (`{"config": ModelConfig, "meta": ...}`), tensor count, then per tensor: name
//! length, UTF-8 name, rank (always 4), dims, and `f32` little-endian data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AfaModel, ModelConfig};
use crate::nn::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"AFAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: serde_json::Value,
}

/// Named tensors plus the model config and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Captures every parameter and buffer of `model`.
    pub fn from_model(model: &AfaModel<f32>, meta: serde_json::Value) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(_, name, _, t)| (name.to_string(), t.clone()))
            .collect();
        Self {
            config: model.config.clone(),
            meta,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model; every model parameter must be present with its exact shape.
    pub fn to_model(&self) -> Result<AfaModel<f32>> {
        let mut model = AfaModel::<f32>::init(self.config.clone(), 0)?;
        let lookup: std::collections::HashMap<&str, &Tensor<f32>> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let ids: Vec<usize> = model.params.iter().map(|(id, ..)| id).collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let src = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let dst = model.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(std::io::Error::other)?;
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        write_u32(w, header.len())?;
        w.write_all(&header)?;
        write_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, 4)?;
            for d in t.shape() {
                write_u32(w, d)?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = read_u32(r)? as usize;
        let header: Header =
            serde_json::from_slice(take(r, hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let name = String::from_utf8(take(r, nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)?;
            if rank != 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has rank {rank}, expected 4"
                )));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = read_u32(r)? as usize;
            }
            let len: usize = shape.iter().product();
            let raw = take(r, len * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::from_vec(shape, data)));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        header.config.validate()?;
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(std::io::Error::other)?;
    w.write_all(&v.to_le_bytes())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], out: &mut [u8]) -> Result<()> {
    out.copy_from_slice(take(r, out.len())?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
