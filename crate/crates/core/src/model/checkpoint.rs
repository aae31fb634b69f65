//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! "HDAC"  u32 version  u32 header_len  header (JSON: config, seed, extra)
//! u32 count
//! count x { u16 name_len  name  u8 trainable  u8 ndim  ndim x u32 dim  f64 data... }
//! u64 FNV-1a checksum of every preceding byte
//! ```

use serde::{Deserialize, Serialize};

use super::{ModelConfig, Param, Parameters};
use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HDAC";
const MAX_HEADER: usize = 1 << 20;
const MAX_ARRAYS: usize = 4096;
const MAX_NDIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    /// Free-form provenance (epoch, mode, ...).
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
    #[serde(skip)]
    pub params: Option<Parameters>,
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        version: CHECKPOINT_VERSION,
        msg: msg.into(),
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = ckpt
        .params
        .as_ref()
        .ok_or_else(|| Error::contract("checkpoint has no parameters"))?;
    let header = serde_json::to_vec(ckpt).map_err(|e| format_err(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.entries.len() as u32).to_le_bytes());
    for p in &params.entries {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize || p.value.ndim() > MAX_NDIM {
            return Err(format_err(format!("array {} cannot be encoded", p.name)));
        }
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(u8::from(p.trainable));
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decode and validate a checkpoint. The parameter layout is checked
/// against the embedded model config.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err("bad magic"));
    }
    if bytes.len() < 16 {
        return Err(format_err("truncated"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            kind: "checkpoint",
            version,
            msg: format!("unsupported version (expected {CHECKPOINT_VERSION})"),
        });
    }
    if u64::from_le_bytes(trailer.try_into().unwrap()) != fnv(body) {
        return Err(format_err("checksum mismatch"));
    }
    let header_len = r.u32()? as usize;
    if header_len > MAX_HEADER {
        return Err(format_err("header too large"));
    }
    let mut ckpt: Checkpoint = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| format_err(format!("header: {e}")))?;
    let count = r.u32()? as usize;
    if count > MAX_ARRAYS {
        return Err(format_err("too many arrays"));
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err("array name is not UTF-8"))?
            .to_string();
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(format_err(format!("bad trainable flag {b}"))),
        };
        let ndim = r.u8()? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(format_err(format!("array {name} has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| format_err(format!("array {name} is too large")))?;
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Array::new(shape, data).map_err(|e| format_err(e.to_string()))?;
        entries.push(Param {
            name,
            value,
            trainable,
        });
    }
    if r.pos != body.len() {
        return Err(format_err("trailing bytes"));
    }
    let params = Parameters { entries };
    let model = super::Model::new(ckpt.config.clone()).map_err(|e| format_err(e.to_string()))?;
    model
        .check_params(&params)
        .map_err(|e| format_err(e.to_string()))?;
    ckpt.params = Some(params);
    Ok(ckpt)
}
