//! Per-node protocol state machine: client store and query, chunk-group
//! maintenance through persistence claims, and decentralized repair.
//!
//! [`Node`] does no I/O. Every entry point takes the current time and returns
//! [`Action`]s (messages to send, timers to arm) for a transport to carry out.

pub mod messages;
mod node;
pub mod view;

use serde::{Deserialize, Serialize};

use crate::codec::{CodecParams, Digest256};
use crate::crypto::NodeId;
use crate::selection::SelectionParams;

pub use messages::Message;
pub use node::{Node, NodeStats};
pub use view::{GroupView, Member, ViewReport};

/// Milliseconds on the node's clock.
pub type Millis = u64;

/// Identifier of a client operation started on a node.
pub type OpId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NodeConfig {
    pub heartbeat_ms: Millis,
    /// Defaults to three heartbeats.
    pub liveness_timeout_ms: Millis,
    pub sync_interval_ms: Millis,
    pub cache_ttl_ms: Millis,
    /// Repairs start after a uniform delay in `[0, repair_jitter_ms]`.
    pub repair_jitter_ms: Millis,
    pub request_timeout_ms: Millis,
    /// Locate rounds per chunk before a store gives up on it.
    pub locate_rounds: u32,
    pub max_fragments: usize,
    pub codec: CodecParams,
    pub selection: SelectionParams,
    /// Takes part in every message flow but never serves fragment data.
    pub byzantine: bool,
    pub seed: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        let codec = CodecParams::default();
        NodeConfig {
            heartbeat_ms: 1_000,
            liveness_timeout_ms: 3_000,
            sync_interval_ms: 5_000,
            cache_ttl_ms: 48 * 3_600_000,
            repair_jitter_ms: 1_000,
            request_timeout_ms: 2_000,
            locate_rounds: 3,
            max_fragments: 1 << 20,
            codec,
            selection: SelectionParams::new(1_000, codec.r_group),
            byzantine: false,
            seed: 0,
        }
    }
}

impl NodeConfig {
    /// Config with intervals derived from one heartbeat period.
    pub fn with_heartbeat(heartbeat_ms: Millis, codec: CodecParams, total_nodes: usize) -> NodeConfig {
        NodeConfig {
            heartbeat_ms,
            liveness_timeout_ms: 3 * heartbeat_ms,
            sync_interval_ms: 5 * heartbeat_ms,
            repair_jitter_ms: heartbeat_ms,
            request_timeout_ms: 2 * heartbeat_ms,
            codec,
            selection: SelectionParams::new(total_nodes, codec.r_group),
            ..NodeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.codec.validate().map_err(|e| e.to_string())?;
        if self.liveness_timeout_ms <= self.heartbeat_ms {
            return Err("liveness timeout must exceed the heartbeat interval".into());
        }
        if self.heartbeat_ms == 0 || self.sync_interval_ms == 0 || self.request_timeout_ms == 0 {
            return Err("intervals must be positive".into());
        }
        Ok(())
    }
}

/// What `store` returns: enough to locate and decode the object later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecipe {
    pub object_hash: Digest256,
    pub chunk_hashes: Vec<Digest256>,
    /// Outer-code ordinal of each chunk, parallel to `chunk_hashes`.
    pub chunk_ordinals: Vec<usize>,
    /// Seconds since the UNIX epoch.
    pub expiration: u64,
    pub params: CodecParams,
}

impl ObjectRecipe {
    pub fn validate(&self) -> Result<(), String> {
        if self.chunk_hashes.len() != self.chunk_ordinals.len() {
            return Err("chunk_hashes and chunk_ordinals differ in length".into());
        }
        if self.chunk_hashes.is_empty() {
            return Err("recipe lists no chunks".into());
        }
        self.params.validate().map_err(|e| e.to_string())
    }

    /// Drops the chunk at `pos`, keeping the two lists aligned.
    pub fn remove_chunk(&mut self, pos: usize) {
        self.chunk_hashes.remove(pos);
        self.chunk_ordinals.remove(pos);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Timer {
    Heartbeat,
    Sync,
    StartRepair(Digest256),
    Request(messages::ReqId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: NodeId, msg: Message },
    Timer { at: Millis, timer: Timer },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpResult {
    Stored(ObjectRecipe),
    Object(Vec<u8>),
    Evicted(NodeId),
    View(ViewReport),
    Failed(String),
}

/// Operator requests carried over the control channel of a running node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlRequest {
    Store { data: Vec<u8>, secret: Vec<u8>, expiration: u64 },
    Query { recipe: ObjectRecipe, secret: Vec<u8> },
    Evict { chunk_hash: Digest256 },
    View { chunk_hash: Digest256 },
    Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ControlResponse {
    Done(OpResult),
    Stats(NodeStats),
}
