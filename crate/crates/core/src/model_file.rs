//! Binary decoder model file.
//!
//! Layout (little endian): magic `TBCIMODL`, format version u32, block
//! count u32, then blocks of `name_len u16, name, payload_len u64, payload`,
//! then the SHA-256 of everything before it. Arrays are a u64 count followed
//! by f64 values; matrices carry u32 rows and cols before row-major values.
//! Unknown blocks are skipped on read.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{CalibrationOptions, DecoderModel, LinearSvmModel, Standardizer};
use crate::error::{BciError, Result};
use crate::xdawn::SpatialFilterBank;

pub const MAGIC: &[u8; 8] = b"TBCIMODL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config_hash: String,
    channel_names: Vec<String>,
    options: CalibrationOptions,
    c: f64,
}

fn put_block(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn f64_array(xs: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * xs.len());
    out.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn matrix(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * m.len());
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn encode_model(model: &DecoderModel) -> Vec<u8> {
    let meta = Meta {
        config_hash: model.config_hash.clone(),
        channel_names: model.channel_names.clone(),
        options: model.options.clone(),
        c: model.svm.c,
    };
    let blocks: Vec<(&str, Vec<u8>)> = vec![
        ("meta", serde_json::to_vec(&meta).expect("meta serializes")),
        ("standardizer.mean", f64_array(&model.standardizer.mean)),
        ("standardizer.sd", f64_array(&model.standardizer.sd)),
        ("xdawn.filters", matrix(&model.bank.filters)),
        ("xdawn.eigenvalues", f64_array(&model.bank.eigenvalues)),
        ("svm.weights", f64_array(&model.svm.weights)),
        ("svm.bias", model.svm.bias.to_le_bytes().to_vec()),
        ("svm.threshold", model.svm.decision_threshold.to_le_bytes().to_vec()),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, payload) in &blocks {
        put_block(&mut out, name, payload);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| BciError::Data("model file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_f64_array(payload: &[u8]) -> Result<Vec<f64>> {
    let mut r = Reader { buf: payload, pos: 0 };
    let n = r.u64()? as usize;
    if payload.len() != 8 + 8 * n {
        return Err(BciError::Data("array block length mismatch".into()));
    }
    (0..n).map(|_| r.f64()).collect()
}

fn read_matrix(payload: &[u8]) -> Result<Array2<f64>> {
    let mut r = Reader { buf: payload, pos: 0 };
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if payload.len() != 8 + 8 * rows * cols {
        return Err(BciError::Data("matrix block length mismatch".into()));
    }
    let v: Vec<f64> = (0..rows * cols).map(|_| r.f64()).collect::<Result<_>>()?;
    Array2::from_shape_vec((rows, cols), v).map_err(|e| BciError::Data(e.to_string()))
}

fn read_scalar(payload: &[u8]) -> Result<f64> {
    let b: [u8; 8] = payload.try_into().map_err(|_| BciError::Data("scalar block length mismatch".into()))?;
    Ok(f64::from_le_bytes(b))
}

pub fn decode_model(bytes: &[u8]) -> Result<DecoderModel> {
    if bytes.len() < MAGIC.len() + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(BciError::Data("not a decoder model file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(BciError::Data("model file checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(BciError::Data(format!("model format version {version} unsupported")));
    }
    let n_blocks = r.u32()?;
    let mut blocks = std::collections::HashMap::new();
    for _ in 0..n_blocks {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| BciError::Data("block name not UTF-8".into()))?;
        let plen = r.u64()? as usize;
        blocks.insert(name.to_string(), r.take(plen)?);
    }
    if !r.done() {
        return Err(BciError::Data("trailing bytes after model blocks".into()));
    }
    let get = |name: &str| blocks.get(name).copied().ok_or_else(|| BciError::Data(format!("model lacks block {name}")));
    let meta: Meta = serde_json::from_slice(get("meta")?).map_err(|e| BciError::Data(format!("model meta: {e}")))?;
    let standardizer =
        Standardizer { mean: read_f64_array(get("standardizer.mean")?)?, sd: read_f64_array(get("standardizer.sd")?)? };
    let bank = SpatialFilterBank {
        filters: read_matrix(get("xdawn.filters")?)?,
        eigenvalues: read_f64_array(get("xdawn.eigenvalues")?)?,
    };
    let svm = LinearSvmModel {
        weights: read_f64_array(get("svm.weights")?)?,
        bias: read_scalar(get("svm.bias")?)?,
        c: meta.c,
        decision_threshold: read_scalar(get("svm.threshold")?)?,
    };
    if bank.n_channels() != meta.channel_names.len()
        || standardizer.mean.len() != svm.weights.len()
        || standardizer.sd.len() != svm.weights.len()
    {
        return Err(BciError::Data("model blocks have inconsistent dimensions".into()));
    }
    Ok(DecoderModel {
        channel_names: meta.channel_names,
        bank,
        standardizer,
        svm,
        options: meta.options,
        config_hash: meta.config_hash,
    })
}

/// SHA-256 (hex) of the encoded model.
pub fn model_digest(model: &DecoderModel) -> String {
    hex::encode(Sha256::digest(encode_model(model)))
}

/// Human-readable companion of the binary file.
pub fn model_summary(model: &DecoderModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config_hash: {}", model.config_hash);
    let _ = writeln!(s, "model_sha256: {}", model_digest(model));
    let _ = writeln!(s, "channels: {} ({})", model.channel_names.len(), model.channel_names.join(" "));
    let _ = writeln!(s, "xdawn filters: {}", model.bank.n_filters());
    let ev: Vec<String> = model.bank.eigenvalues.iter().map(|v| format!("{v:.4}")).collect();
    let _ = writeln!(s, "xdawn eigenvalues: {}", ev.join(" "));
    let _ = writeln!(s, "features: {}", model.svm.weights.len());
    let _ = writeln!(s, "svm C: {}", model.svm.c);
    let _ = writeln!(s, "svm bias: {:.6}", model.svm.bias);
    let _ = writeln!(s, "decision threshold: {:.6}", model.svm.decision_threshold);
    let _ = writeln!(s, "training: {:?}, threshold mode: {:?}", model.options.training, model.options.threshold);
    let norm = model.svm.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    let _ = writeln!(s, "weight norm: {norm:.6}");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_model() -> DecoderModel {
        DecoderModel {
            channel_names: vec!["Cz".into(), "Pz".into(), "Oz".into()],
            bank: SpatialFilterBank {
                filters: Array2::from_shape_fn((2, 3), |(r, c)| r as f64 - 0.5 * c as f64),
                eigenvalues: vec![3.0, 0.25],
            },
            standardizer: Standardizer { mean: vec![0.1, -0.2, 0.3, 0.4], sd: vec![1.0, 2.0, 0.5, 1.5] },
            svm: LinearSvmModel { weights: vec![0.5, -1.0, 2.0, 1e-300], bias: -0.75, c: 1.0, decision_threshold: 0.0 },
            options: CalibrationOptions::default(),
            config_hash: "abc123".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let m = toy_model();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode_model(&toy_model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(decode_model(&bytes).is_err());
        assert!(decode_model(b"nonsense").is_err());
        let good = encode_model(&toy_model());
        assert!(decode_model(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn summary_mentions_hash() {
        let s = model_summary(&toy_model());
        assert!(s.contains("config_hash: abc123"));
        assert!(s.contains(&model_digest(&toy_model())));
    }
}
