//! Boundary-crossing messages and their byte codec.
//!
//! Layout (little-endian):
//! `kind: u8 | seq: u64 | B: u32 | dim: u32 | B × (len: u32, utf-8 id) | B·dim × f32`.

use crate::error::{Result, VflError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    FederatedEmbeddingBatch = 0,
    CutGradientBatch = 1,
}

impl TryFrom<u8> for MessageKind {
    type Error = VflError;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(MessageKind::FederatedEmbeddingBatch),
            1 => Ok(MessageKind::CutGradientBatch),
            other => Err(VflError::Decode(format!("unknown message kind {other}"))),
        }
    }
}

/// The only data that ever leaves a party: sample IDs and a `B × dim` matrix
/// of 32-bit reals (embeddings forward, gradients backward).
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolMessage {
    pub kind: MessageKind,
    pub seq: u64,
    pub batch_ids: Vec<String>,
    pub dim: usize,
    pub payload: Vec<f32>,
}

impl ProtocolMessage {
    pub fn from_tensor(kind: MessageKind, seq: u64, batch_ids: Vec<String>, t: &Tensor) -> Result<Self> {
        if t.rows() != batch_ids.len() {
            return Err(VflError::dim("ProtocolMessage", batch_ids.len(), t.rows()));
        }
        Ok(ProtocolMessage {
            kind,
            seq,
            batch_ids,
            dim: t.cols(),
            payload: t.data().iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.payload.iter().map(|&v| v as f64).collect();
        Tensor::from_vec(self.batch_ids.len(), self.dim, data).expect("payload shape checked on construction")
    }

    pub fn batch_size(&self) -> usize {
        self.batch_ids.len()
    }

    /// Exact encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + self.batch_ids.iter().map(|s| 4 + s.len()).sum::<usize>()
            + 4 * self.payload.len()
    }
}

pub const HEADER_LEN: usize = 1 + 8 + 4 + 4;

pub fn encode_message(msg: &ProtocolMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.push(msg.kind as u8);
    out.extend_from_slice(&msg.seq.to_le_bytes());
    out.extend_from_slice(&(msg.batch_ids.len() as u32).to_le_bytes());
    out.extend_from_slice(&(msg.dim as u32).to_le_bytes());
    for id in &msg.batch_ids {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    for v in &msg.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
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
            .ok_or_else(|| {
                VflError::Decode(format!(
                    "truncated buffer: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_message(bytes: &[u8]) -> Result<ProtocolMessage> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let kind = MessageKind::try_from(r.take(1)?[0])?;
    let seq = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let b = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut batch_ids = Vec::with_capacity(b.min(bytes.len()));
    for _ in 0..b {
        let len = r.u32()? as usize;
        let raw = r.take(len)?;
        let id = std::str::from_utf8(raw)
            .map_err(|e| VflError::Decode(format!("sample id is not utf-8: {e}")))?;
        batch_ids.push(id.to_string());
    }
    let n = b
        .checked_mul(dim)
        .ok_or_else(|| VflError::Decode("payload size overflow".into()))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| VflError::Decode("payload size overflow".into()))?)?;
    let payload = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if r.pos != bytes.len() {
        return Err(VflError::Decode(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(ProtocolMessage {
        kind,
        seq,
        batch_ids,
        dim,
        payload,
    })
}
