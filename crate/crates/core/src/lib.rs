//! Durable decentralized object storage.
//!
//! Objects are split by an outer rateless code into chunks; each chunk is
//! spread by an inner rateless code over a group of verifiably selected peers
//! that keep it alive through heartbeats and decentralized repair. The crate
//! also carries a group-level discrete-event simulator and an analytical
//! durability calculator.

pub mod analysis;
pub mod codec;
pub mod crypto;
mod hexser;
pub mod protocol;
pub mod scalar;
pub mod selection;
pub mod sim;
pub mod transport;

pub use codec::{content_hash, Chunk, CodecParams, Digest256, Fragment};
pub use crypto::{KeyPair, NodeId, PublicKey};
pub use scalar::Scalar;
pub use selection::{SelectionParams, SelectionProof};
pub use sim::{Metrics, SimConfig};

pub type StateVector64 = analysis::StateVector<f64>;
pub type TransitionMatrix64 = analysis::TransitionMatrix<f64>;
