//! Training checkpoints: latent weights, BN state and run metadata.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `STTK` |
//! | 1 | version (1) |
//! | 3 | reserved, zero |
//! | 4 | metadata length `L` (u32) |
//! | L | metadata, UTF-8 JSON |
//! | 4 | tensor count (u32) |
//! | … | per tensor: name length (u16), name, rank (u8), dims (u32 each), f32 data |
//! | 4 | CRC-32 (IEEE) of every preceding byte |

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::Normalization;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STTK";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub normalization: Normalization,
    /// Epochs completed when the weights were captured.
    pub epoch: usize,
    pub test_acc: Option<f64>,
    pub seed: u64,
}

pub fn encode_checkpoint(meta: &CheckpointMeta, model: &Model<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&[0; 3]);
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let state = model.state();
    out.extend_from_slice(&(state.len() as u32).to_le_bytes());
    for (name, t) in &state {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_f32_tensor(&mut out, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], label: &str) -> Result<(CheckpointMeta, Model<f32>)> {
    let body = verify_crc(bytes, label)?;
    let mut r = ByteReader::new(body, label);
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: label.to_string(),
            expected: "STTK".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(4, format!("unsupported version {version}")));
    }
    r.take(3)?;
    let len = r.u32()? as usize;
    let at = r.pos;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| r.error(at, format!("metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut state = HashMap::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.error(at, "tensor name is not UTF-8"))?;
        let (shape, data) = r.f32_tensor()?;
        let t = Tensor::new(shape, data).map_err(|e| r.error(at, e.to_string()))?;
        state.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(r.error(r.pos, "trailing bytes before checksum"));
    }
    let mut model = Model::new(meta.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load_state(&state)?;
    Ok((meta, model))
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, model: &Model<f32>) -> Result<()> {
    let bytes = encode_checkpoint(meta, model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Model<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Split off and check the CRC-32 trailer.
pub(crate) fn verify_crc<'a>(bytes: &'a [u8], label: &str) -> Result<&'a [u8]> {
    if bytes.len() < 8 {
        return Err(Error::Parse {
            path: label.to_string(),
            offset: bytes.len() as u64,
            message: "file too short".into(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

/// Little-endian cursor that reports failures with byte offsets.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub pos: usize,
    label: &'a str,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], label: &'a str) -> Self {
        ByteReader { bytes, pos: 0, label }
    }

    pub fn error(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.label.to_string(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(self.pos, format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.error(self.pos, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn u64s(&mut self, n: usize) -> Result<Vec<u64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error(self.pos, "length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    /// Rank (u8), dims (u32 each), then f32 data.
    pub fn f32_tensor(&mut self) -> Result<(Vec<usize>, Vec<f32>)> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| self.error(self.pos, "tensor size overflow"))?;
        Ok((shape, self.f32s(numel)?))
    }
}

pub(crate) fn put_f32_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
