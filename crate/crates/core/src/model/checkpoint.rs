//! Self-describing binary checkpoint of a [`ClassifierState`].
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "CFMODEL\0"
//! version  u32
//! header   u32 length + JSON {config, shape, counters}
//! tensors  u32 count, then per tensor:
//!          u16 name length, name, u64 element count, f64 values
//! checksum 32-byte SHA-256 of everything above
//! ```
//!
//! Tensor names are `param.*`, `adam_m.*` and `adam_v.*` over the network's
//! dotted tensor names.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ClassifierState, ModelConfig, Network, Shape};
use crate::util::derive_rng;

pub const MAGIC: &[u8; 8] = b"CFMODEL\0";
pub const VERSION: u32 = 1;
const SECTIONS: [&str; 3] = ["param", "adam_m", "adam_v"];

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("tensor {name:?} has {found} elements, expected {expected}")]
    LengthMismatch { name: String, expected: usize, found: usize },
    #[error("tensor {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("trailing bytes after tensors")]
    TrailingBytes,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    shape: Shape,
    t_generator: u64,
    t_domain: u64,
    epoch: u64,
    round: u64,
}

fn sections(state: &ClassifierState) -> [&Network; 3] {
    [&state.net, &state.adam_m, &state.adam_v]
}

pub fn encode_checkpoint(state: &ClassifierState) -> Vec<u8> {
    let header = Header {
        config: state.config.clone(),
        shape: state.shape(),
        t_generator: state.t_generator,
        t_domain: state.t_domain,
        epoch: state.epoch,
        round: state.round,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors: Vec<(String, &[f64])> = SECTIONS
        .iter()
        .zip(sections(state))
        .flat_map(|(sec, net)| net.tensors().into_iter().map(move |(n, t)| (format!("{sec}.{n}"), t)))
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, values) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parameter count implied by a shape, or `None` on overflow.
fn parameter_count(s: &Shape) -> Option<usize> {
    let dense = |i: usize, o: usize| i.checked_mul(o)?.checked_add(o);
    let dt = s.d / s.tokens;
    let att = dense(dt, dt)?
        .checked_mul(3)?
        .checked_add(dense(s.d, s.d)?)?
        .checked_add(s.d.checked_mul(2)?)?
        .checked_add(1)?;
    let mlp = |i: usize, o: usize| dense(i, s.hidden)?.checked_add(dense(s.hidden, o)?);
    dense(s.input, s.d)?
        .checked_mul(2)?
        .checked_add(att.checked_mul(2)?)?
        .checked_add(mlp(2 * s.d, 1)?)?
        .checked_add(mlp(2 * s.d, s.input)?)?
        .checked_add(mlp(s.d, s.domains)?.checked_mul(2)?)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ClassifierState, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 12 };
    let header_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    header.config.validate().map_err(|e| CheckpointError::BadHeader(e.to_string()))?;
    let s = header.shape;
    if s.input == 0 || s.d == 0 || s.hidden == 0 || s.domains == 0 || s.tokens == 0 || s.d % s.tokens != 0 {
        return Err(CheckpointError::BadHeader("degenerate shape".into()));
    }
    if header.config.shape(s.input, s.domains) != s {
        return Err(CheckpointError::BadHeader("shape disagrees with config".into()));
    }
    // Refuse shapes whose tensors could not fit in the remaining bytes
    // before allocating anything.
    let needed = parameter_count(&s)
        .and_then(|n| n.checked_mul(3 * 8))
        .ok_or_else(|| CheckpointError::BadHeader("shape overflows".into()))?;
    if needed > body.len() {
        return Err(CheckpointError::Truncated);
    }

    let template = Network::init(s, &mut derive_rng(0, "checkpoint", 0)).zeros_like();
    let mut nets = [template.clone(), template.clone(), template];
    let count = r.u32()? as usize;
    let expected: usize = nets.iter().map(|n| n.tensors().len()).sum();
    if count != expected {
        return Err(CheckpointError::BadHeader(format!("{count} tensors, expected {expected}")));
    }
    for (sec, net) in SECTIONS.iter().zip(nets.iter_mut()) {
        for (name, slot) in net.tensors_mut() {
            let full = format!("{sec}.{name}");
            let name_len = r.u16()? as usize;
            let found = String::from_utf8_lossy(r.take(name_len)?).into_owned();
            if found != full {
                return Err(CheckpointError::UnexpectedTensor(found));
            }
            let len = r.u64()?;
            if len != slot.len() as u64 {
                return Err(CheckpointError::LengthMismatch {
                    name: full,
                    expected: slot.len(),
                    found: len.try_into().unwrap_or(usize::MAX),
                });
            }
            let raw = r.take(slot.len() * 8)?;
            for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            if sec == &"param" && slot.iter().any(|v| v.is_nan()) {
                return Err(CheckpointError::NonFinite(full));
            }
        }
    }
    if r.pos != body.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    let [net, adam_m, adam_v] = nets;
    Ok(ClassifierState {
        config: header.config,
        net,
        adam_m,
        adam_v,
        t_generator: header.t_generator,
        t_domain: header.t_domain,
        epoch: header.epoch,
        round: header.round,
    })
}
