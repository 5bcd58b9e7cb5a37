//! Length-prefixed little-endian wire frames.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::tensor::{DType, DenseTensor, TensorData};

pub const PROTOCOL_VERSION: u8 = 1;
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;
pub const MAX_FRAME_ENV: &str = "DMLFLOW_MAX_FRAME";

/// Envelope bytes: version, kind, source, channel, round.
const ENVELOPE_LEN: usize = 1 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgKind {
    Data,
    Eos,
    RoundEnd,
}

impl MsgKind {
    pub fn tag(self) -> u8 {
        match self {
            MsgKind::Data => 0,
            MsgKind::Eos => 1,
            MsgKind::RoundEnd => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<MsgKind> {
        match tag {
            0 => Some(MsgKind::Data),
            1 => Some(MsgKind::Eos),
            2 => Some(MsgKind::RoundEnd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Envelope {
    pub version: u8,
    pub kind: MsgKind,
    pub source: u32,
    pub channel: u32,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorMsg {
    pub envelope: Envelope,
    pub payload: Vec<DenseTensor>,
}

impl TensorMsg {
    pub fn data(source: u32, channel: u32, round: u32, payload: Vec<DenseTensor>) -> Self {
        TensorMsg {
            envelope: Envelope {
                version: PROTOCOL_VERSION,
                kind: MsgKind::Data,
                source,
                channel,
                round,
            },
            payload,
        }
    }

    pub fn eos(source: u32, channel: u32, round: u32) -> Self {
        TensorMsg {
            envelope: Envelope {
                version: PROTOCOL_VERSION,
                kind: MsgKind::Eos,
                source,
                channel,
                round,
            },
            payload: Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("frame of {len} bytes exceeds the {max}-byte limit")]
    FrameTooLarge { len: usize, max: usize },
    #[error("truncated frame: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("unknown dtype tag {0:#04x}")]
    UnknownDType(u8),
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("protocol version {found} is not supported (expected {expected})")]
    Version { expected: u8, found: u8 },
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("malformed tensor: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Frame cap, from `DMLFLOW_MAX_FRAME` when set to a positive integer.
pub fn max_frame() -> usize {
    std::env::var(MAX_FRAME_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(DEFAULT_MAX_FRAME)
}

fn tensor_len(t: &DenseTensor) -> usize {
    2 + 4 * t.shape().len() + t.byte_len()
}

/// Length of the frame body that follows the 4-byte prefix.
pub fn body_len(payload: &[DenseTensor]) -> usize {
    ENVELOPE_LEN + 4 + payload.iter().map(tensor_len).sum::<usize>()
}

pub fn encode_frame(m: &TensorMsg) -> Vec<u8> {
    let body = body_len(&m.payload);
    let mut out = Vec::with_capacity(4 + body);
    out.extend_from_slice(&(body as u32).to_le_bytes());
    let e = &m.envelope;
    out.push(e.version);
    out.push(e.kind.tag());
    for v in [e.source, e.channel, e.round, m.payload.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for t in &m.payload {
        out.push(t.dtype().tag());
        out.push(t.shape().len() as u8);
        for d in t.shape() {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t.data() {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let rest = self.buf.len() - self.pos;
        if rest < n {
            return Err(CodecError::Truncated { needed: n - rest });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes one complete frame, including its length prefix.
pub fn decode_frame(bytes: &[u8]) -> Result<TensorMsg, CodecError> {
    decode_frame_with_limit(bytes, max_frame())
}

pub fn decode_frame_with_limit(bytes: &[u8], max: usize) -> Result<TensorMsg, CodecError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let len = c.u32()? as usize;
    if len > max {
        return Err(CodecError::FrameTooLarge { len, max });
    }
    let body = c.take(len)?;
    if c.pos != bytes.len() {
        return Err(CodecError::Trailing(bytes.len() - c.pos));
    }
    decode_body(body)
}

fn decode_body(body: &[u8]) -> Result<TensorMsg, CodecError> {
    let mut c = Cursor { buf: body, pos: 0 };
    let version = c.u8()?;
    if version != PROTOCOL_VERSION {
        return Err(CodecError::Version {
            expected: PROTOCOL_VERSION,
            found: version,
        });
    }
    let kind_tag = c.u8()?;
    let kind = MsgKind::from_tag(kind_tag).ok_or(CodecError::UnknownKind(kind_tag))?;
    let (source, channel, round) = (c.u32()?, c.u32()?, c.u32()?);
    let count = c.u32()? as usize;
    let mut payload = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = c.u8()?;
        let dtype = DType::from_tag(tag).ok_or(CodecError::UnknownDType(tag))?;
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()?);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let n = n.filter(|n| n.checked_mul(dtype.size()).is_some_and(|b| b <= body.len()));
        let n = n.ok_or(CodecError::Truncated { needed: usize::MAX })?;
        let raw = c.take(n * dtype.size())?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
            DType::I64 => TensorData::I64(
                raw.chunks_exact(8)
                    .map(|b| i64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(raw.to_vec()),
        };
        payload.push(DenseTensor::new(shape, data)?);
    }
    if c.pos != body.len() {
        return Err(CodecError::Trailing(body.len() - c.pos));
    }
    Ok(TensorMsg {
        envelope: Envelope {
            version,
            kind,
            source,
            channel,
            round,
        },
        payload,
    })
}

pub fn write_frame(w: &mut impl Write, m: &TensorMsg) -> Result<usize, CodecError> {
    let bytes = encode_frame(m);
    w.write_all(&bytes)?;
    Ok(bytes.len())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before any byte.
pub fn read_frame(r: &mut impl Read, max: usize) -> Result<Option<TensorMsg>, CodecError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(CodecError::Truncated { needed: 4 - got }),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(prefix) as usize;
    if len > max {
        return Err(CodecError::FrameTooLarge { len, max });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CodecError::Truncated { needed: len },
        _ => e.into(),
    })?;
    decode_body(&body).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_data_message_layout() {
        let bytes = encode_frame(&TensorMsg::data(0, 0, 0, Vec::new()));
        let mut expected = 18u32.to_le_bytes().to_vec();
        expected.extend_from_slice(&[1, 0]);
        expected.extend_from_slice(&[0; 12]);
        expected.extend_from_slice(&[0; 4]);
        assert_eq!(bytes, expected);
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn round_trip_with_all_dtypes() {
        let m = TensorMsg::data(
            7,
            3,
            12,
            vec![
                DenseTensor::from_f32(vec![2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0]).unwrap(),
                DenseTensor::from_i64(vec![3], vec![-1, 0, i64::MAX]).unwrap(),
                DenseTensor::from_u8(vec![0], vec![]).unwrap(),
                DenseTensor::from_u8(vec![], vec![9]).unwrap(),
            ],
        );
        let bytes = encode_frame(&m);
        assert_eq!(bytes.len(), 4 + body_len(&m.payload));
        assert_eq!(decode_frame(&bytes).unwrap(), m);
        let mut r = io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut r, DEFAULT_MAX_FRAME).unwrap(), Some(m));
        assert_eq!(read_frame(&mut r, DEFAULT_MAX_FRAME).unwrap(), None);
    }

    #[test]
    fn rejects_malformed_frames() {
        let t = DenseTensor::vector(vec![1.0, 2.0]);
        let good = encode_frame(&TensorMsg::data(0, 0, 0, vec![t]));

        let mut bad_dtype = good.clone();
        bad_dtype[22] = 0xFF;
        assert!(matches!(decode_frame(&bad_dtype), Err(CodecError::UnknownDType(0xFF))));

        let mut bad_kind = good.clone();
        bad_kind[5] = 9;
        assert!(matches!(decode_frame(&bad_kind), Err(CodecError::UnknownKind(9))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(decode_frame(&bad_version), Err(CodecError::Version { found: 2, .. })));

        assert!(matches!(decode_frame(&good[..good.len() - 1]), Err(CodecError::Truncated { .. })));
        assert!(matches!(
            decode_frame_with_limit(&good, 10),
            Err(CodecError::FrameTooLarge { max: 10, .. })
        ));

        let mut huge_shape = good.clone();
        huge_shape[24..28].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_frame(&huge_shape), Err(CodecError::Truncated { .. })));

        let mut stream = io::Cursor::new(good[..10].to_vec());
        assert!(matches!(read_frame(&mut stream, DEFAULT_MAX_FRAME), Err(CodecError::Truncated { .. })));
    }
}
