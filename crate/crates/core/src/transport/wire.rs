//! Frame layout, all integers big-endian:
//!
//! ```text
//! total_len: u32 | version: u8 | msg_type: u8 | src: [u8; 32] | dst: [u8; 32] | payload
//! ```
//!
//! `total_len` counts the whole frame including itself, so an empty payload
//! gives a 70-byte frame.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::crypto::NodeId;
use crate::protocol::messages::{msg_type, Message, PayloadError};
use crate::Digest256;

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 1 + 32 + 32;
pub const MAX_PAYLOAD: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub version: u8,
    pub msg_type: u8,
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: Vec<u8>,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: {have} of {need} bytes")]
    Truncated { have: usize, need: usize },
    #[error("length field {field} does not match frame of {actual} bytes")]
    LengthMismatch { field: usize, actual: usize },
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 16 MiB cap")]
    Oversize(usize),
    #[error("payload: {0}")]
    Payload(#[from] PayloadError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn known_type(t: u8) -> bool {
    (msg_type::STORE_FRAGMENT..=msg_type::MEMBERSHIP_PUSH).contains(&t)
        || (msg_type::EVICT_MEMBER..=msg_type::CONTROL_RESPONSE).contains(&t)
}

impl Envelope {
    pub fn new(src: NodeId, dst: NodeId, msg: &Message) -> Envelope {
        Envelope {
            version: VERSION,
            msg_type: msg.msg_type(),
            src,
            dst,
            payload: msg.encode_payload(),
        }
    }

    pub fn message(&self) -> Result<Message, WireError> {
        Ok(Message::decode_payload(self.msg_type, &self.payload)?)
    }
}

pub fn encode_envelope(env: &Envelope) -> Result<Vec<u8>, WireError> {
    if env.payload.len() > MAX_PAYLOAD {
        return Err(WireError::Oversize(env.payload.len()));
    }
    let total = HEADER_LEN + env.payload.len();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&(total as u32).to_be_bytes());
    out.push(env.version);
    out.push(env.msg_type);
    out.extend_from_slice(env.src.as_bytes());
    out.extend_from_slice(env.dst.as_bytes());
    out.extend_from_slice(&env.payload);
    Ok(out)
}

pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, WireError> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            have: bytes.len(),
            need: HEADER_LEN,
        });
    }
    let field = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if field < HEADER_LEN {
        return Err(WireError::LengthMismatch {
            field,
            actual: bytes.len(),
        });
    }
    if field - HEADER_LEN > MAX_PAYLOAD {
        return Err(WireError::Oversize(field - HEADER_LEN));
    }
    if field != bytes.len() {
        return Err(WireError::LengthMismatch {
            field,
            actual: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(WireError::Version(bytes[4]));
    }
    if !known_type(bytes[5]) {
        return Err(WireError::UnknownType(bytes[5]));
    }
    Ok(Envelope {
        version: bytes[4],
        msg_type: bytes[5],
        src: Digest256(bytes[6..38].try_into().unwrap()),
        dst: Digest256(bytes[38..70].try_into().unwrap()),
        payload: bytes[HEADER_LEN..].to_vec(),
    })
}

/// Reads one frame from a stream. `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Envelope>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let total = u32::from_be_bytes(len) as usize;
    if total < HEADER_LEN {
        return Err(WireError::LengthMismatch { field: total, actual: 4 });
    }
    if total - HEADER_LEN > MAX_PAYLOAD {
        return Err(WireError::Oversize(total - HEADER_LEN));
    }
    let mut buf = vec![0u8; total];
    buf[..4].copy_from_slice(&len);
    r.read_exact(&mut buf[4..])?;
    decode_envelope(&buf).map(Some)
}

pub fn write_frame<W: Write>(w: &mut W, env: &Envelope) -> Result<(), WireError> {
    w.write_all(&encode_envelope(env)?)?;
    Ok(())
}
