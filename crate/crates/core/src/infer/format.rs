//! Exported ternary models (`.sttn` files).
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `STTN` |
//! | 1 | version (1) |
//! | 3 | reserved, zero |
//! | 4 | header length `L` (u32) |
//! | L | header, UTF-8 JSON: `{"model": …, "normalization": …}` |
//! | 4 | layer count (u32) |
//! | … | layer records, each starting with a u8 tag |
//! | 4 | CRC-32 (IEEE) of every preceding byte |
//!
//! Record tags: 1 float conv, 2 ternary conv, 3 ReLU, 4 max-pool, 5 flatten,
//! 6 global average pool, 7 linear, 8 residual unit. See `docs/FORMAT.md`
//! for the per-record fields.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{BnParams, FusedLayer, TernaryConvLayer, TernaryModel};
use super::packed::{PackedKernel, PackedMatrix};
use crate::checkpoint::{put_f32_tensor, verify_crc, ByteReader};
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::tensor::Tensor;
use crate::train::Normalization;

pub const MODEL_MAGIC: &[u8; 4] = b"STTN";
pub const MODEL_VERSION: u8 = 1;

const TAG_FLOAT_CONV: u8 = 1;
const TAG_TERNARY_CONV: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_MAXPOOL: u8 = 4;
const TAG_FLATTEN: u8 = 5;
const TAG_GLOBAL_AVG_POOL: u8 = 6;
const TAG_LINEAR: u8 = 7;
const TAG_RESIDUAL: u8 = 8;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    normalization: Normalization,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_ternary(out: &mut Vec<u8>, l: &TernaryConvLayer) {
    out.push(TAG_TERNARY_CONV);
    out.extend_from_slice(&(l.name.len() as u16).to_le_bytes());
    out.extend_from_slice(l.name.as_bytes());
    for d in l.kernel.shape {
        put_u32(out, d);
    }
    put_u32(out, l.stride);
    put_u32(out, l.pad);
    out.push(l.ternary_input as u8);
    out.push(l.relu as u8);
    out.extend_from_slice(&l.kernel.scale.to_le_bytes());
    put_u32(out, l.kernel.rows.words_per_row());
    for w in l.kernel.rows.mask().iter().chain(l.kernel.rows.sign()) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for v in [&l.bn.gamma, &l.bn.beta, &l.bn.mean, &l.bn.var] {
        put_f32s(out, v);
    }
}

pub fn encode_model(model: &TernaryModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&[0; 3]);
    let json = serde_json::to_vec(&Header {
        model: model.config.clone(),
        normalization: model.normalization.clone(),
    })?;
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u32(&mut out, model.layers.len());
    for layer in &model.layers {
        match layer {
            FusedLayer::FloatConv { weight, stride, pad } => {
                out.push(TAG_FLOAT_CONV);
                put_u32(&mut out, *stride);
                put_u32(&mut out, *pad);
                put_f32_tensor(&mut out, weight);
            }
            FusedLayer::TernaryConv(t) => put_ternary(&mut out, t),
            FusedLayer::Relu => out.push(TAG_RELU),
            FusedLayer::MaxPool { kernel, stride } => {
                out.push(TAG_MAXPOOL);
                put_u32(&mut out, *kernel);
                put_u32(&mut out, *stride);
            }
            FusedLayer::Flatten => out.push(TAG_FLATTEN),
            FusedLayer::GlobalAvgPool => out.push(TAG_GLOBAL_AVG_POOL),
            FusedLayer::Linear { weight, bias } => {
                out.push(TAG_LINEAR);
                put_f32_tensor(&mut out, weight);
                put_f32_tensor(&mut out, bias);
            }
            FusedLayer::Residual {
                downsample,
                first,
                second,
            } => {
                out.push(TAG_RESIDUAL);
                out.push(*downsample as u8);
                put_ternary(&mut out, first);
                put_ternary(&mut out, second);
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_flag(r: &mut ByteReader, what: &str) -> Result<bool> {
    let at = r.pos;
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(r.error(at, format!("{what} flag must be 0 or 1, got {v}"))),
    }
}

fn read_tensor(r: &mut ByteReader) -> Result<Tensor<f32>> {
    let at = r.pos;
    let (shape, data) = r.f32_tensor()?;
    Tensor::new(shape, data).map_err(|e| r.error(at, e.to_string()))
}

fn read_ternary(r: &mut ByteReader) -> Result<TernaryConvLayer> {
    let at = r.pos;
    let tag = r.u8()?;
    if tag != TAG_TERNARY_CONV {
        return Err(r.error(at, format!("expected ternary conv record, found tag {tag}")));
    }
    let len = r.u16()? as usize;
    let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.error(at + 3, "layer name is not UTF-8"))?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let [out_c, in_c, kh, kw, stride, pad] = dims;
    if out_c == 0 || in_c == 0 || kh == 0 || kw == 0 || stride == 0 {
        return Err(r.error(at, format!("{name}: degenerate geometry {dims:?}")));
    }
    let ternary_input = read_flag(r, "input mode")?;
    let relu = read_flag(r, "relu")?;
    let scale_at = r.pos;
    let scale = r.f32()?;
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(r.error(scale_at, format!("{name}: bad scale {scale}")));
    }
    let words_at = r.pos;
    let words = r.u32()? as usize;
    if words != (in_c * kh * kw).div_ceil(64) {
        return Err(r.error(words_at, format!("{name}: {words} words per row for patch length {}", in_c * kh * kw)));
    }
    let total = out_c
        .checked_mul(words)
        .ok_or_else(|| r.error(words_at, "word count overflow"))?;
    let mask = r.u64s(total)?;
    let sign = r.u64s(total)?;
    let rows = PackedMatrix::from_words(out_c, in_c * kh * kw, mask, sign)
        .map_err(|e| r.error(words_at, format!("{name}: {e}")))?;
    let bn = BnParams {
        gamma: r.f32s(in_c)?,
        beta: r.f32s(in_c)?,
        mean: r.f32s(in_c)?,
        var: r.f32s(in_c)?,
    };
    Ok(TernaryConvLayer {
        name,
        bn,
        ternary_input,
        kernel: PackedKernel {
            shape: [out_c, in_c, kh, kw],
            scale,
            rows,
        },
        stride,
        pad,
        relu,
    })
}

pub fn decode_model(bytes: &[u8], label: &str) -> Result<TernaryModel> {
    let body = verify_crc(bytes, label)?;
    let mut r = ByteReader::new(body, label);
    let magic = r.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            what: label.to_string(),
            expected: "STTN".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u8()?;
    if version != MODEL_VERSION {
        return Err(r.error(4, format!("unsupported version {version}")));
    }
    r.take(3)?;
    let len = r.u32()? as usize;
    let at = r.pos;
    let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| r.error(at, format!("header: {e}")))?;
    header.model.validate()?;
    let count = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let tag = r.u8()?;
        layers.push(match tag {
            TAG_FLOAT_CONV => {
                let stride = r.u32()? as usize;
                let pad = r.u32()? as usize;
                FusedLayer::FloatConv {
                    weight: read_tensor(&mut r)?,
                    stride,
                    pad,
                }
            }
            TAG_TERNARY_CONV => {
                r.pos = at;
                FusedLayer::TernaryConv(read_ternary(&mut r)?)
            }
            TAG_RELU => FusedLayer::Relu,
            TAG_MAXPOOL => FusedLayer::MaxPool {
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
            },
            TAG_FLATTEN => FusedLayer::Flatten,
            TAG_GLOBAL_AVG_POOL => FusedLayer::GlobalAvgPool,
            TAG_LINEAR => FusedLayer::Linear {
                weight: read_tensor(&mut r)?,
                bias: read_tensor(&mut r)?,
            },
            TAG_RESIDUAL => FusedLayer::Residual {
                downsample: read_flag(&mut r, "downsample")?,
                first: read_ternary(&mut r)?,
                second: read_ternary(&mut r)?,
            },
            _ => return Err(r.error(at, format!("unknown layer tag {tag}"))),
        });
    }
    if r.remaining() != 0 {
        return Err(r.error(r.pos, format!("{} trailing bytes", r.remaining())));
    }
    Ok(TernaryModel {
        config: header.model,
        normalization: header.normalization,
        layers,
    })
}

pub fn save_model(path: &Path, model: &TernaryModel) -> Result<()> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TernaryModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::infer::probe_batch;
    use crate::nn::{Architecture, Model, QuantMode};

    fn fused(arch: Architecture) -> TernaryModel {
        let mut cfg = ModelConfig::new(arch, QuantMode::Sttn22);
        cfg.width = 0.25;
        let m = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = arch.input_shape()[0];
        let norm = Normalization {
            mean: vec![0.5; c],
            std: vec![0.25; c],
        };
        TernaryModel::from_model(&m, &norm).unwrap()
    }

    #[test]
    fn round_trip() {
        for arch in [Architecture::LenetT, Architecture::ResminiT] {
            let m = fused(arch);
            let back = decode_model(&encode_model(&m).unwrap(), "mem").unwrap();
            assert_eq!(back, m);
            let x = probe_batch(arch, 2, 0);
            assert_eq!(back.forward(&x, false).unwrap(), m.forward(&x, false).unwrap());
        }
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_model(&fused(Architecture::LenetT)).unwrap();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x10;
        assert!(matches!(decode_model(&flipped, "mem"), Err(Error::Checksum { .. })));
        assert!(decode_model(&bytes[..bytes.len() - 9], "mem").is_err());
    }

    #[test]
    fn sign_outside_mask_is_rejected_with_offset() {
        let m = fused(Architecture::LenetT);
        let mut bytes = encode_model(&m).unwrap();
        bytes.truncate(bytes.len() - 4);
        // Locate the first ternary record's sign plane and set a bit whose
        // mask bit is clear.
        let t = m.ternary_layers()[0];
        let words = t.kernel.rows.mask();
        let (w, bit) = (0..words.len())
            .flat_map(|w| (0..64).map(move |b| (w, b)))
            .find(|&(w, b)| words[w] >> b & 1 == 0 && b < t.kernel.patch_len())
            .unwrap();
        let mut needle = Vec::new();
        for x in words.iter().chain(t.kernel.rows.sign()) {
            needle.extend_from_slice(&x.to_le_bytes());
        }
        let start = bytes.windows(needle.len()).position(|s| s == needle.as_slice()).unwrap();
        let sign_at = start + words.len() * 8 + w * 8;
        let mut word = u64::from_le_bytes(bytes[sign_at..sign_at + 8].try_into().unwrap());
        word |= 1 << bit;
        bytes[sign_at..sign_at + 8].copy_from_slice(&word.to_le_bytes());
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        match decode_model(&bytes, "mem") {
            Err(Error::Parse { offset, message, .. }) => {
                assert!(offset > 0);
                assert!(message.contains("mask"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
