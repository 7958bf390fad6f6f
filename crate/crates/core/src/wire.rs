// SPDX-License-Identifier: Apache-2.0

//! Length-prefixed binary framing shared by the coordinator and learners.
//!
//! ```text
//! frame   = length:u32be  type:u8  job_id:[u8;16]  token:[u8;32]  payload
//! AGG_MSG = round:u32be sender:u16be kind:u8 chunk:u16be step:u16be
//!           count:u32be ciphertext*count (fixed width, big-endian)
//! ```
//!
//! `length` counts payload bytes only. All integers are big-endian.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::codec::CodecConfig;
use crate::paillier::{CryptoError, PublicKey};
use crate::protocol::{AggregateMessage, PayloadKind, Protocol};
use crate::topology::Rank;

/// Bytes preceding the payload.
pub const HEADER_LEN: usize = 4 + 1 + 16 + 32;

/// Upper bound on a single payload.
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("malformed {0}")]
    Malformed(&'static str),
    #[error("ciphertext: {0}")]
    Crypto(#[from] CryptoError),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct JobId(pub [u8; 16]);

impl JobId {
    /// Left-aligns up to 16 bytes of `label`, zero padded.
    pub fn from_label(label: &str) -> Self {
        let mut id = [0u8; 16];
        let bytes = label.as_bytes();
        let n = bytes.len().min(16);
        id[..n].copy_from_slice(&bytes[..n]);
        Self(id)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = decode_hex(s)?;
        Some(Self(bytes.try_into().ok()?))
    }

    pub fn to_hex(&self) -> String {
        encode_hex(&self.0)
    }
}

impl fmt::Debug for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "JobId({})", self.to_hex())
    }
}

/// Pre-shared per-participant credential carried in every frame.
#[derive(Clone, Copy, Default)]
pub struct AuthToken(pub [u8; 32]);

impl AuthToken {
    /// Compares in time independent of where the tokens differ.
    pub fn ct_eq(&self, other: &AuthToken) -> bool {
        let diff = self.0.iter().zip(other.0.iter()).fold(0u8, |acc, (a, b)| acc | (a ^ b));
        std::hint::black_box(diff) == 0
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = decode_hex(s)?;
        Some(Self(bytes.try_into().ok()?))
    }

    pub fn to_hex(&self) -> String {
        encode_hex(&self.0)
    }
}

impl fmt::Debug for AuthToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AuthToken(..)")
    }
}

fn encode_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    let s = s.trim();
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Register = 0x01,
    TopologyAssign = 0x02,
    PubKey = 0x03,
    AggMsg = 0x04,
    AggSubmit = 0x05,
    Result = 0x06,
    Heartbeat = 0x07,
    Pause = 0x08,
    Resume = 0x09,
    Error = 0x0A,
}

impl TryFrom<u8> for MessageType {
    type Error = WireError;

    fn try_from(b: u8) -> Result<Self, WireError> {
        Ok(match b {
            0x01 => Self::Register,
            0x02 => Self::TopologyAssign,
            0x03 => Self::PubKey,
            0x04 => Self::AggMsg,
            0x05 => Self::AggSubmit,
            0x06 => Self::Result,
            0x07 => Self::Heartbeat,
            0x08 => Self::Pause,
            0x09 => Self::Resume,
            0x0A => Self::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub kind: MessageType,
    pub job_id: JobId,
    pub token: AuthToken,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: MessageType, job_id: JobId, token: AuthToken, payload: Vec<u8>) -> Self {
        Self {
            kind,
            job_id,
            token,
            payload,
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.job_id.0);
        out.extend_from_slice(&self.token.0);
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes one frame from the front of `buf`, returning it and the bytes consumed.
    /// `Ok(None)` means more input is needed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, WireError> {
        if buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::TooLarge(len));
        }
        let kind = MessageType::try_from(buf[4])?;
        if buf.len() < HEADER_LEN + len {
            return Ok(None);
        }
        let job_id = JobId(buf[5..21].try_into().unwrap());
        let token = AuthToken(buf[21..53].try_into().unwrap());
        let payload = buf[HEADER_LEN..HEADER_LEN + len].to_vec();
        Ok(Some((
            Frame {
                kind,
                job_id,
                token,
                payload,
            },
            HEADER_LEN + len,
        )))
    }
}

/// Writes one frame.
pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<(), WireError> {
    w.write_all(&frame.encode())?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on clean end of stream before a header.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Truncated("frame header")),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header[..4].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let kind = MessageType::try_from(header[4])?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated("frame payload"),
        _ => WireError::Io(e),
    })?;
    Ok(Some(Frame {
        kind,
        job_id: JobId(header[5..21].try_into().unwrap()),
        token: AuthToken(header[21..53].try_into().unwrap()),
        payload,
    }))
}

struct Cursor<'a> {
    buf: &'a [u8],
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() < n {
            return Err(WireError::Truncated(self.what));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, WireError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| WireError::Malformed(self.what))
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.buf)
    }

    fn finish(&self) -> Result<(), WireError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(WireError::Malformed(self.what))
        }
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    let len = bytes.len().min(u16::MAX as usize);
    out.extend_from_slice(&(len as u16).to_be_bytes());
    out.extend_from_slice(&bytes[..len]);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterPayload {
    pub name: String,
    pub location_tag: Option<String>,
    pub endpoint: String,
}

impl RegisterPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put_string(&mut out, &self.name);
        put_string(&mut out, self.location_tag.as_deref().unwrap_or(""));
        put_string(&mut out, &self.endpoint);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(buf, "REGISTER");
        let name = c.string()?;
        let location = c.string()?;
        let endpoint = c.string()?;
        c.finish()?;
        Ok(Self {
            name,
            location_tag: (!location.is_empty()).then_some(location),
            endpoint,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberEntry {
    pub rank: Rank,
    pub name: String,
    pub endpoint: String,
}

/// Ring membership pushed to each learner when a round sequence (re)starts.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyAssignPayload {
    pub start_round: u32,
    pub protocol: Protocol,
    pub your_rank: Rank,
    pub vector_length: u32,
    /// Rounds the job runs in total; 0 means unbounded.
    pub total_rounds: u32,
    pub codec: CodecConfig,
    pub members: Vec<MemberEntry>,
}

impl TopologyAssignPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.start_round.to_be_bytes());
        out.push(self.protocol.code());
        out.extend_from_slice(&self.your_rank.get().to_be_bytes());
        out.extend_from_slice(&self.vector_length.to_be_bytes());
        out.extend_from_slice(&self.total_rounds.to_be_bytes());
        out.extend_from_slice(&self.codec.scale_bits.to_be_bytes());
        out.extend_from_slice(&self.codec.max_parties.to_be_bytes());
        out.extend_from_slice(&self.codec.magnitude_bound.to_be_bytes());
        out.extend_from_slice(&(self.members.len() as u16).to_be_bytes());
        for m in &self.members {
            out.extend_from_slice(&m.rank.get().to_be_bytes());
            put_string(&mut out, &m.name);
            put_string(&mut out, &m.endpoint);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(buf, "TOPOLOGY_ASSIGN");
        let start_round = c.u32()?;
        let protocol = Protocol::from_code(c.u8()?).ok_or(WireError::Malformed("protocol code"))?;
        let your_rank = Rank::new(c.u16()?).ok_or(WireError::Malformed("rank 0"))?;
        let vector_length = c.u32()?;
        let total_rounds = c.u32()?;
        let codec = CodecConfig {
            scale_bits: c.u32()?,
            max_parties: c.u32()?,
            magnitude_bound: c.f64()?,
        };
        let count = c.u16()? as usize;
        let mut members = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = Rank::new(c.u16()?).ok_or(WireError::Malformed("rank 0"))?;
            members.push(MemberEntry {
                rank,
                name: c.string()?,
                endpoint: c.string()?,
            });
        }
        c.finish()?;
        Ok(Self {
            start_round,
            protocol,
            your_rank,
            vector_length,
            total_rounds,
            codec,
            members,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PubKeyPayload {
    pub epoch: u32,
    /// First round encrypted under this key.
    pub effective_round: u32,
    pub key: PublicKey,
}

impl PubKeyPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.epoch.to_be_bytes());
        out.extend_from_slice(&self.effective_round.to_be_bytes());
        out.extend_from_slice(&self.key.to_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(buf, "PUBKEY");
        let epoch = c.u32()?;
        let effective_round = c.u32()?;
        let key = PublicKey::from_bytes(c.rest())?;
        Ok(Self {
            epoch,
            effective_round,
            key,
        })
    }
}

const KIND_FULL: u8 = 0;
const KIND_CHUNK: u8 = 1;

/// Serializes the body of an `AGG_MSG` / `AGG_SUBMIT` frame.
pub fn encode_aggregate(msg: &AggregateMessage, ciphertext_width: usize) -> Vec<u8> {
    let (kind, index, step) = match msg.kind {
        PayloadKind::FullVector => (KIND_FULL, 0, 0),
        PayloadKind::Chunk { index, step } => (KIND_CHUNK, index, step),
    };
    let mut out = Vec::with_capacity(15 + msg.ciphertexts.len() * ciphertext_width);
    out.extend_from_slice(&msg.round.to_be_bytes());
    out.extend_from_slice(&msg.sender.get().to_be_bytes());
    out.push(kind);
    out.extend_from_slice(&index.to_be_bytes());
    out.extend_from_slice(&step.to_be_bytes());
    out.extend_from_slice(&(msg.ciphertexts.len() as u32).to_be_bytes());
    for c in &msg.ciphertexts {
        out.extend_from_slice(&c.to_bytes(ciphertext_width));
    }
    out
}

/// Parses an aggregate body; ciphertexts are tagged with `key`'s fingerprint.
pub fn decode_aggregate(job_id: JobId, buf: &[u8], key: &PublicKey) -> Result<AggregateMessage, WireError> {
    let mut c = Cursor::new(buf, "AGG_MSG");
    let round = c.u32()?;
    let sender = Rank::new(c.u16()?).ok_or(WireError::Malformed("rank 0"))?;
    let kind = c.u8()?;
    let index = c.u16()?;
    let step = c.u16()?;
    let count = c.u32()? as usize;
    let kind = match kind {
        KIND_FULL => PayloadKind::FullVector,
        KIND_CHUNK => PayloadKind::Chunk { index, step },
        _ => return Err(WireError::Malformed("payload kind")),
    };
    let width = key.ciphertext_width();
    let body = c.rest();
    if body.len() != count * width {
        return Err(WireError::Malformed("ciphertext count does not match body"));
    }
    let ciphertexts = body
        .chunks_exact(width)
        .map(|b| key.ciphertext_from_bytes(b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AggregateMessage {
        job_id,
        round,
        sender,
        kind,
        ciphertexts,
    })
}

/// Reads just the round number of an aggregate body.
pub fn peek_aggregate_round(buf: &[u8]) -> Result<u32, WireError> {
    Cursor::new(buf, "AGG_MSG").u32()
}

/// `RESULT`: the averaged vector as big-endian IEEE-754 doubles.
pub fn encode_result(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_be_bytes()).collect()
}

pub fn decode_result(buf: &[u8]) -> Result<Vec<f64>, WireError> {
    if buf.len() % 8 != 0 {
        return Err(WireError::Malformed("RESULT length"));
    }
    Ok(buf
        .chunks_exact(8)
        .map(|b| f64::from_be_bytes(b.try_into().unwrap()))
        .collect())
}

pub fn encode_u32(v: u32) -> Vec<u8> {
    v.to_be_bytes().to_vec()
}

pub fn decode_u32(buf: &[u8], what: &'static str) -> Result<u32, WireError> {
    let mut c = Cursor::new(buf, what);
    let v = c.u32()?;
    c.finish()?;
    Ok(v)
}

pub fn encode_heartbeat(seq: u64) -> Vec<u8> {
    seq.to_be_bytes().to_vec()
}

pub fn decode_heartbeat(buf: &[u8]) -> Result<u64, WireError> {
    let mut c = Cursor::new(buf, "HEARTBEAT");
    let v = c.u64()?;
    c.finish()?;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ErrorCode(pub u16);

impl ErrorCode {
    pub const UNAUTHORIZED: Self = Self(1);
    pub const REJECTED: Self = Self(2);
    pub const PROTOCOL: Self = Self(3);
    pub const RED_FLAG: Self = Self(4);
    pub const DIVERGENT: Self = Self(5);
    pub const STALE_EPOCH: Self = Self(6);
    pub const ABORTED: Self = Self(7);
    pub const MALFORMED: Self = Self(8);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub detail: String,
}

impl ErrorPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.code.0.to_be_bytes().to_vec();
        out.extend_from_slice(self.detail.as_bytes());
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut c = Cursor::new(buf, "ERROR");
        let code = ErrorCode(c.u16()?);
        let detail = String::from_utf8(c.rest().to_vec()).map_err(|_| WireError::Malformed("ERROR detail"))?;
        Ok(Self { code, detail })
    }
}
