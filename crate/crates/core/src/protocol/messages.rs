//! Protocol message set. Each message is its own struct so the wire layer
//! can frame it with a type byte and a bincode payload.

use serde::{Deserialize, Serialize};

use crate::codec::{Digest256, Fragment};
use crate::crypto::{NodeId, PublicKey};
use crate::selection::SelectionProof;

/// Request identifier, unique per sender.
pub type ReqId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreFragment {
    pub req: ReqId,
    pub fragment: Fragment,
    /// Seconds since the UNIX epoch.
    pub expiration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AckResult {
    Stored(SelectionProof),
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreAck {
    pub req: ReqId,
    pub chunk_hash: Digest256,
    pub stream_index: u64,
    pub result: AckResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GetFragment {
    pub req: ReqId,
    pub chunk_hash: Digest256,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentData {
    pub req: ReqId,
    pub chunk_hash: Digest256,
    pub fragment: Option<Fragment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProofRequest {
    pub req: ReqId,
    pub chunk_hash: Digest256,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProofResponse {
    pub req: ReqId,
    pub chunk_hash: Digest256,
    pub proof: Option<SelectionProof>,
    /// Index of the fragment this node holds for the chunk, if any.
    pub stored_index: Option<u64>,
    /// When that fragment was stored, in the responder's clock.
    pub stored_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistenceClaim {
    pub chunk_hash: Digest256,
    pub stream_index: u64,
    pub sender_pk: PublicKey,
    pub proof: SelectionProof,
    /// Sender clock, milliseconds.
    pub timestamp: u64,
    pub signature: Vec<u8>,
}

impl PersistenceClaim {
    /// Bytes covered by the signature.
    pub fn signed_payload(
        chunk_hash: &Digest256,
        stream_index: u64,
        sender_pk: &PublicKey,
        proof: &SelectionProof,
        timestamp: u64,
    ) -> Vec<u8> {
        let mut v = Vec::with_capacity(32 + 8 + 32 + 32 + 80 + 8 + 16);
        v.extend_from_slice(b"claim\0");
        v.extend_from_slice(chunk_hash.as_bytes());
        v.extend_from_slice(&stream_index.to_be_bytes());
        v.extend_from_slice(&sender_pk.0);
        v.extend_from_slice(&proof.vrf.r);
        v.extend_from_slice(&proof.vrf.proof);
        v.extend_from_slice(&timestamp.to_be_bytes());
        v
    }

    pub fn payload(&self) -> Vec<u8> {
        Self::signed_payload(&self.chunk_hash, self.stream_index, &self.sender_pk, &self.proof, self.timestamp)
    }
}

/// One entry of a shipped membership view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub fragment_index: u64,
    pub proof: SelectionProof,
}

impl MemberRecord {
    pub fn node_id(&self) -> NodeId {
        self.proof.node_id()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRequest {
    pub chunk_hash: Digest256,
    pub chunk_len: u64,
    pub expiration: u64,
    pub view: Vec<MemberRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkCacheRequest {
    pub req: ReqId,
    pub chunk_hash: Digest256,
    /// Index at which the holder should build the new fragment.
    pub stream_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkCacheResponse {
    pub req: ReqId,
    pub chunk_hash: Digest256,
    pub fragment: Option<Fragment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipPush {
    pub chunk_hash: Digest256,
    pub view: Vec<MemberRecord>,
}

/// Administrative: the receiver drops its fragment of the chunk and does not
/// rejoin the group until the fragment would have expired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictMember {
    pub chunk_hash: Digest256,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    StoreFragment(StoreFragment),
    StoreAck(StoreAck),
    GetFragment(GetFragment),
    FragmentData(FragmentData),
    ProofRequest(ProofRequest),
    ProofResponse(ProofResponse),
    PersistenceClaim(PersistenceClaim),
    RepairRequest(RepairRequest),
    ChunkCacheRequest(ChunkCacheRequest),
    ChunkCacheResponse(ChunkCacheResponse),
    MembershipPush(MembershipPush),
    EvictMember(EvictMember),
}

pub mod msg_type {
    pub const STORE_FRAGMENT: u8 = 0x01;
    pub const STORE_ACK: u8 = 0x02;
    pub const GET_FRAGMENT: u8 = 0x03;
    pub const FRAGMENT_DATA: u8 = 0x04;
    pub const PROOF_REQUEST: u8 = 0x05;
    pub const PROOF_RESPONSE: u8 = 0x06;
    pub const PERSISTENCE_CLAIM: u8 = 0x07;
    pub const REPAIR_REQUEST: u8 = 0x08;
    pub const CHUNK_CACHE_REQUEST: u8 = 0x09;
    pub const CHUNK_CACHE_RESPONSE: u8 = 0x0a;
    pub const MEMBERSHIP_PUSH: u8 = 0x0b;
    pub const EVICT_MEMBER: u8 = 0x20;
    pub const CONTROL_REQUEST: u8 = 0x21;
    pub const CONTROL_RESPONSE: u8 = 0x22;
}

#[derive(Debug, thiserror::Error)]
pub enum PayloadError {
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload decode failed: {0}")]
    Decode(#[from] bincode::Error),
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        use msg_type::*;
        match self {
            Message::StoreFragment(_) => STORE_FRAGMENT,
            Message::StoreAck(_) => STORE_ACK,
            Message::GetFragment(_) => GET_FRAGMENT,
            Message::FragmentData(_) => FRAGMENT_DATA,
            Message::ProofRequest(_) => PROOF_REQUEST,
            Message::ProofResponse(_) => PROOF_RESPONSE,
            Message::PersistenceClaim(_) => PERSISTENCE_CLAIM,
            Message::RepairRequest(_) => REPAIR_REQUEST,
            Message::ChunkCacheRequest(_) => CHUNK_CACHE_REQUEST,
            Message::ChunkCacheResponse(_) => CHUNK_CACHE_RESPONSE,
            Message::MembershipPush(_) => MEMBERSHIP_PUSH,
            Message::EvictMember(_) => EVICT_MEMBER,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::StoreFragment(_) => "StoreFragment",
            Message::StoreAck(_) => "StoreAck",
            Message::GetFragment(_) => "GetFragment",
            Message::FragmentData(_) => "FragmentData",
            Message::ProofRequest(_) => "ProofRequest",
            Message::ProofResponse(_) => "ProofResponse",
            Message::PersistenceClaim(_) => "PersistenceClaim",
            Message::RepairRequest(_) => "RepairRequest",
            Message::ChunkCacheRequest(_) => "ChunkCacheRequest",
            Message::ChunkCacheResponse(_) => "ChunkCacheResponse",
            Message::MembershipPush(_) => "MembershipPush",
            Message::EvictMember(_) => "EvictMember",
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let r = match self {
            Message::StoreFragment(m) => bincode::serialize(m),
            Message::StoreAck(m) => bincode::serialize(m),
            Message::GetFragment(m) => bincode::serialize(m),
            Message::FragmentData(m) => bincode::serialize(m),
            Message::ProofRequest(m) => bincode::serialize(m),
            Message::ProofResponse(m) => bincode::serialize(m),
            Message::PersistenceClaim(m) => bincode::serialize(m),
            Message::RepairRequest(m) => bincode::serialize(m),
            Message::ChunkCacheRequest(m) => bincode::serialize(m),
            Message::ChunkCacheResponse(m) => bincode::serialize(m),
            Message::MembershipPush(m) => bincode::serialize(m),
            Message::EvictMember(m) => bincode::serialize(m),
        };
        r.expect("in-memory serialization cannot fail")
    }

    pub fn decode_payload(ty: u8, payload: &[u8]) -> Result<Message, PayloadError> {
        use msg_type::*;
        Ok(match ty {
            STORE_FRAGMENT => Message::StoreFragment(bincode::deserialize(payload)?),
            STORE_ACK => Message::StoreAck(bincode::deserialize(payload)?),
            GET_FRAGMENT => Message::GetFragment(bincode::deserialize(payload)?),
            FRAGMENT_DATA => Message::FragmentData(bincode::deserialize(payload)?),
            PROOF_REQUEST => Message::ProofRequest(bincode::deserialize(payload)?),
            PROOF_RESPONSE => Message::ProofResponse(bincode::deserialize(payload)?),
            PERSISTENCE_CLAIM => Message::PersistenceClaim(bincode::deserialize(payload)?),
            REPAIR_REQUEST => Message::RepairRequest(bincode::deserialize(payload)?),
            CHUNK_CACHE_REQUEST => Message::ChunkCacheRequest(bincode::deserialize(payload)?),
            CHUNK_CACHE_RESPONSE => Message::ChunkCacheResponse(bincode::deserialize(payload)?),
            MEMBERSHIP_PUSH => Message::MembershipPush(bincode::deserialize(payload)?),
            EVICT_MEMBER => Message::EvictMember(bincode::deserialize(payload)?),
            other => return Err(PayloadError::UnknownType(other)),
        })
    }
}
