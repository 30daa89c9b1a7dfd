//! Message framing plus two delivery backends: a deterministic simulated
//! network and a TCP runtime for local deployments.

pub mod sim;
pub mod socket;
pub mod wire;

pub use sim::{LatencyModel, SimNetwork};
pub use wire::{decode_envelope, encode_envelope, Envelope, WireError};
