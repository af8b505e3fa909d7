//! Single-file training checkpoint: little-endian header, named float32 blocks,
//! trailing SHA-256 of everything before it.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use super::engine::Trainer;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ParamStore, Precision};

pub const MAGIC: &[u8; 8] = b"BROWCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBlob {
    pub version: u32,
    pub step: u64,
    pub config_hash: [u8; 32],
    pub blocks: Vec<Block>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated blob".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl CheckpointBlob {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
            for &d in &b.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(b.data.len() as u64).to_le_bytes());
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch; blob is corrupt".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        let step = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = r.u64()? as usize;
            if dims.iter().product::<usize>() != count {
                return Err(Error::Checkpoint(format!("block `{name}` has inconsistent size")));
            }
            let raw = r.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push(Block { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after last block".into()));
        }
        Ok(Self {
            version,
            step,
            config_hash,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn tensor_block(name: String, t: &Tensor) -> Result<Block> {
    Ok(Block {
        name,
        dims: t.dims().to_vec(),
        data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?,
    })
}

fn block_tensor(b: &Block, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(&b.data, b.dims.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Appends one `prefix/name` block per tensor of `store`.
pub fn push_store(blocks: &mut Vec<Block>, prefix: &str, store: &ParamStore) -> Result<()> {
    for (n, t) in store.iter() {
        blocks.push(tensor_block(format!("{prefix}/{n}"), t)?);
    }
    Ok(())
}

/// Copy of `store` with every tensor replaced by the `prefix/name` block of `blob`.
pub fn restore_store(blob: &CheckpointBlob, prefix: &str, store: &ParamStore) -> Result<ParamStore> {
    let mut out = store.clone();
    for i in 0..store.len() {
        let name = format!("{prefix}/{}", store.names()[i]);
        let b = blob
            .block(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
        if b.dims != store.tensors()[i].dims() {
            return Err(Error::Checkpoint(format!("block `{name}` has shape {:?}", b.dims)));
        }
        out.set(i, &block_tensor(b, store.tensors()[i].dtype())?)?;
    }
    Ok(out)
}

/// Frozen teacher weights of a checkpoint, shaped by `model`.
pub fn teacher_from_checkpoint(model: &EncoderConfig, blob: &CheckpointBlob) -> Result<ParamStore> {
    let template = crate::model::init_pair(model, 0)?.teacher;
    restore_store(blob, "teacher", &template)
}

impl Trainer {
    pub fn checkpoint(&self) -> Result<CheckpointBlob> {
        if self.config.model.precision != Precision::F32 {
            return Err(Error::Checkpoint("checkpoints hold float32 parameters; use f32 precision".into()));
        }
        let mut blocks = Vec::new();
        push_store(&mut blocks, "student", &self.pair.student)?;
        push_store(&mut blocks, "teacher", &self.pair.teacher)?;
        push_store(&mut blocks, "projector", &self.pair.projector)?;
        let (m, v) = self.optimizer.moments();
        for (i, name) in self.optimizer.names().iter().enumerate() {
            blocks.push(tensor_block(format!("adam.m/{name}"), &m[i])?);
            blocks.push(tensor_block(format!("adam.v/{name}"), &v[i])?);
        }
        blocks.push(tensor_block("state/center".into(), &self.center)?);
        Ok(CheckpointBlob {
            version: FORMAT_VERSION,
            step: self.step,
            config_hash: self.config.hash()?,
            blocks,
        })
    }

    /// Rebuilds a trainer from `config` and a checkpoint taken under the same config.
    /// Nothing is returned unless every block restores cleanly.
    pub fn resume(config: &Config, blob: &CheckpointBlob) -> Result<Self> {
        if blob.config_hash != config.hash()? {
            return Err(Error::Checkpoint("config hash differs from the checkpoint's".into()));
        }
        let fresh = Trainer::new(config)?;
        let dt = config.model.dtype();
        let student = restore_store(blob, "student", &fresh.pair.student)?;
        let teacher = restore_store(blob, "teacher", &fresh.pair.teacher)?;
        let projector = restore_store(blob, "projector", &fresh.pair.projector)?;
        let mut optimizer = fresh.optimizer.clone();
        let (m0, _) = fresh.optimizer.moments();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (i, name) in fresh.optimizer.names().iter().enumerate() {
            for (prefix, dst) in [("adam.m", &mut first), ("adam.v", &mut second)] {
                let key = format!("{prefix}/{name}");
                let b = blob
                    .block(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing block `{key}`")))?;
                if b.dims != m0[i].dims() {
                    return Err(Error::Checkpoint(format!("block `{key}` has shape {:?}", b.dims)));
                }
                dst.push(block_tensor(b, dt)?);
            }
        }
        optimizer.set_moments(first, second)?;
        optimizer.step = blob.step;
        let cb = blob
            .block("state/center")
            .ok_or_else(|| Error::Checkpoint("missing block `state/center`".into()))?;
        if cb.dims != fresh.center.dims() {
            return Err(Error::Checkpoint("center block has wrong shape".into()));
        }
        let center = block_tensor(cb, dt)?;
        let mut pair = fresh.pair;
        pair.student = student;
        pair.teacher = teacher;
        pair.projector = projector;
        Ok(Trainer {
            config: config.clone(),
            pair,
            optimizer,
            center,
            step: blob.step,
        })
    }
}
