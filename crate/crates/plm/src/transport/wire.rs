//! Bit-exact wire format.
//!
//! Every message is framed as a fixed 32-byte little-endian header, followed
//! by `ndim` u32 dimensions, followed by the packed payload:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "PLLM"
//!      4     2  version (u16 LE)
//!      6     1  phase       (0 = preparation, 1 = offline, 2 = online)
//!      7     1  protocol id (0 = control, 1 = mul_f, 2 = mul_g, 3 = perm,
//!                            4 = nonlinear, 5 = prediction)
//!      8     1  dtype       (0 = f32, 1 = u64, 2 = bytes)
//!      9     1  ndim
//!     10     2  reserved (0)
//!     12     4  step id (u32 LE, strictly increasing per
//!                        (session, protocol, direction) stream)
//!     16    16  session id (u128 LE)
//!     32  4*ndim  dims (u32 LE each)
//!      then      payload: f32/u64 values packed LE, or raw bytes
//! ```
//!
//! For `bytes` payloads ndim is 1 and dims[0] is the byte length; for numeric
//! payloads the payload length is the dimension product times the value width.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PLLM";
pub const VERSION: u16 = 1;
pub const WIRE_HEADER_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    Preparation,
    Offline,
    Online,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Preparation, Phase::Offline, Phase::Online];

    pub fn as_u8(self) -> u8 {
        match self {
            Phase::Preparation => 0,
            Phase::Offline => 1,
            Phase::Online => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Phase::Preparation),
            1 => Ok(Phase::Offline),
            2 => Ok(Phase::Online),
            _ => Err(Error::Decode(format!("bad phase byte {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Preparation => "preparation",
            Phase::Offline => "offline",
            Phase::Online => "online",
        }
    }
}

/// Protocol identifiers; 1..=5 are pinned, 0 carries session control traffic
/// (handshakes, public parameters, calibration hints).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum ProtocolId {
    Control,
    MulF,
    MulG,
    Perm,
    Nonlinear,
    Prediction,
}

impl ProtocolId {
    pub fn as_u8(self) -> u8 {
        match self {
            ProtocolId::Control => 0,
            ProtocolId::MulF => 1,
            ProtocolId::MulG => 2,
            ProtocolId::Perm => 3,
            ProtocolId::Nonlinear => 4,
            ProtocolId::Prediction => 5,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(ProtocolId::Control),
            1 => Ok(ProtocolId::MulF),
            2 => Ok(ProtocolId::MulG),
            3 => Ok(ProtocolId::Perm),
            4 => Ok(ProtocolId::Nonlinear),
            5 => Ok(ProtocolId::Prediction),
            _ => Err(Error::Decode(format!("bad protocol byte {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProtocolId::Control => "control",
            ProtocolId::MulF => "mul_f",
            ProtocolId::MulG => "mul_g",
            ProtocolId::Perm => "perm",
            ProtocolId::Nonlinear => "nonlinear",
            ProtocolId::Prediction => "prediction",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U64,
    Bytes,
}

impl Dtype {
    fn as_u8(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U64 => 1,
            Dtype::Bytes => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U64),
            2 => Ok(Dtype::Bytes),
            _ => Err(Error::Decode(format!("bad dtype byte {v}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    F32(Tensor),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

impl Body {
    pub fn dtype(&self) -> Dtype {
        match self {
            Body::F32(_) => Dtype::F32,
            Body::U64(_) => Dtype::U64,
            Body::Bytes(_) => Dtype::Bytes,
        }
    }

    pub fn tensor(self) -> Result<Tensor> {
        match self {
            Body::F32(t) => Ok(t),
            other => Err(Error::Decode(format!(
                "expected f32 body, got {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn u64s(self) -> Result<Vec<u64>> {
        match self {
            Body::U64(v) => Ok(v),
            other => Err(Error::Decode(format!(
                "expected u64 body, got {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn bytes(self) -> Result<Vec<u8>> {
        match self {
            Body::Bytes(b) => Ok(b),
            other => Err(Error::Decode(format!(
                "expected bytes body, got {:?}",
                other.dtype()
            ))),
        }
    }
}

/// A phase- and protocol-tagged message. `step` is assigned by the session at
/// send time.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub phase: Phase,
    pub protocol: ProtocolId,
    pub step: u32,
    pub body: Body,
}

impl Message {
    pub fn f32(phase: Phase, protocol: ProtocolId, t: Tensor) -> Self {
        Message {
            phase,
            protocol,
            step: 0,
            body: Body::F32(t),
        }
    }

    pub fn u64s(phase: Phase, protocol: ProtocolId, v: Vec<u64>) -> Self {
        Message {
            phase,
            protocol,
            step: 0,
            body: Body::U64(v),
        }
    }

    pub fn bytes(phase: Phase, protocol: ProtocolId, b: Vec<u8>) -> Self {
        Message {
            phase,
            protocol,
            step: 0,
            body: Body::Bytes(b),
        }
    }

    pub fn encode(&self, session_id: u128) -> Vec<u8> {
        let (dims, payload_len): (Vec<u32>, usize) = match &self.body {
            Body::F32(t) => (
                t.shape().iter().map(|&d| d as u32).collect(),
                t.len() * 4,
            ),
            Body::U64(v) => (vec![v.len() as u32], v.len() * 8),
            Body::Bytes(b) => (vec![b.len() as u32], b.len()),
        };
        let mut out = Vec::with_capacity(WIRE_HEADER_LEN + dims.len() * 4 + payload_len);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.phase.as_u8());
        out.push(self.protocol.as_u8());
        out.push(self.body.dtype().as_u8());
        out.push(dims.len() as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&session_id.to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.body {
            Body::F32(t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Body::U64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Body::Bytes(b) => out.extend_from_slice(b),
        }
        out
    }

    pub fn decode(frame: &[u8]) -> Result<(u128, Message)> {
        if frame.len() < WIRE_HEADER_LEN {
            return Err(Error::Decode("frame shorter than header".into()));
        }
        if frame[0..4] != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let version = u16::from_le_bytes([frame[4], frame[5]]);
        if version != VERSION {
            return Err(Error::VersionMismatch {
                ours: VERSION,
                theirs: version,
            });
        }
        let phase = Phase::from_u8(frame[6])?;
        let protocol = ProtocolId::from_u8(frame[7])?;
        let dtype = Dtype::from_u8(frame[8])?;
        let ndim = frame[9] as usize;
        let step = u32::from_le_bytes(frame[12..16].try_into().unwrap());
        let session_id = u128::from_le_bytes(frame[16..32].try_into().unwrap());
        let dims_end = WIRE_HEADER_LEN + ndim * 4;
        if frame.len() < dims_end {
            return Err(Error::Decode("truncated dims".into()));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| {
                u32::from_le_bytes(
                    frame[WIRE_HEADER_LEN + i * 4..WIRE_HEADER_LEN + i * 4 + 4]
                        .try_into()
                        .unwrap(),
                ) as usize
            })
            .collect();
        let payload = &frame[dims_end..];
        let count: usize = dims.iter().product();
        let body = match dtype {
            Dtype::F32 => {
                if payload.len() != count * 4 {
                    return Err(Error::Decode("payload length mismatch".into()));
                }
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Body::F32(Tensor::new(dims, data)?)
            }
            Dtype::U64 => {
                if payload.len() != count * 8 {
                    return Err(Error::Decode("payload length mismatch".into()));
                }
                Body::U64(
                    payload
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            Dtype::Bytes => {
                if ndim != 1 || payload.len() != dims[0] {
                    return Err(Error::Decode("payload length mismatch".into()));
                }
                Body::Bytes(payload.to_vec())
            }
        };
        Ok((
            session_id,
            Message {
                phase,
                protocol,
                step,
                body,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.0]).unwrap();
        let mut m = Message::f32(Phase::Online, ProtocolId::MulF, t);
        m.step = 17;
        let enc = m.encode(0xDEADBEEF);
        // header + 2 dims + 6 f32 values
        assert_eq!(enc.len(), 32 + 8 + 24);
        let (sid, back) = Message::decode(&enc).unwrap();
        assert_eq!(sid, 0xDEADBEEF);
        assert_eq!(back, m);
    }

    #[test]
    fn roundtrip_u64_and_bytes() {
        let m = Message::u64s(Phase::Offline, ProtocolId::Perm, vec![3, 1, 4, 1, 5]);
        let (_, back) = Message::decode(&m.encode(7)).unwrap();
        assert_eq!(back, m);
        let m = Message::bytes(Phase::Online, ProtocolId::Prediction, vec![9, 8, 7]);
        let (_, back) = Message::decode(&m.encode(7)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn payload_size_rule() {
        let t = Tensor::from_vec(vec![0.0; 1000]);
        let m = Message::f32(Phase::Online, ProtocolId::Control, t);
        // 4000 payload bytes + 32 header + one u32 dim
        assert_eq!(m.encode(1).len(), 4000 + 32 + 4);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let m = Message::bytes(Phase::Online, ProtocolId::Control, vec![1]);
        let mut enc = m.encode(1);
        enc[0] = b'X';
        assert!(matches!(Message::decode(&enc), Err(Error::Decode(_))));
        let mut enc = m.encode(1);
        enc[4] = 99;
        assert!(matches!(
            Message::decode(&enc),
            Err(Error::VersionMismatch { .. })
        ));
    }
}
