//! Group-level discrete-event simulator for long-horizon durability runs.
//!
//! Honest nodes fail as independent Poisson processes and are replaced at
//! once by fresh nodes at new ring positions, so N and the Byzantine share
//! stay fixed. Chunk groups follow the protocol's rules (selection lottery,
//! nearest-eligible recruitment, repair after liveness expiry, booster
//! cache) without exchanging individual messages. Time is in hours.

mod attack;
mod baseline;
mod entropy;
mod report;

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CodecParams;

pub use attack::{run_targeted, AttackStrategy, AttackerConfig};
pub use baseline::{run_baseline, BaselineSim};
pub use entropy::{run_entropy, trace_fragments, EntropySim, StepEvent, StepKind};
pub use report::{
    linear_fit, loss_onset, mean_by_value, run_byzantine_sweep, run_point, sweep, LinearFit, SweepRow, SweepVar,
    System, TraceRow, CSV_SCHEMA_VERSION,
};

pub const HOURS_PER_YEAR: f64 = 8_760.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Source of the per-(node, chunk) lottery output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lottery {
    /// Keyed 256-bit hash standing in for the VRF output.
    #[default]
    Prg,
    /// Real ECVRF proofs with node ids derived from the public keys. Slow.
    Vrf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub nodes: usize,
    pub byzantine_fraction: f64,
    /// Failures per honest node per year.
    pub churn_per_year: f64,
    pub objects: usize,
    pub codec: CodecParams,
    /// Zero disables the chunk cache.
    pub cache_ttl_hours: f64,
    pub years: f64,
    pub heartbeat_hours: f64,
    pub liveness_hours: f64,
    pub repair_jitter_hours: f64,
    /// Transfer plus decode time of one repair.
    pub repair_latency_hours: f64,
    /// Replicas per object in the baseline system.
    pub replicas: usize,
    pub lottery: Lottery,
    /// Group whose alive-honest fragment count is recorded.
    pub trace_group: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nodes: 1_000,
            byzantine_fraction: 0.0,
            churn_per_year: 20.0,
            objects: 100,
            codec: CodecParams::default(),
            cache_ttl_hours: 0.0,
            years: 1.0,
            heartbeat_hours: 1.0,
            liveness_hours: 3.0,
            repair_jitter_hours: 1.0,
            repair_latency_hours: 1.0,
            replicas: 3,
            lottery: Lottery::Prg,
            trace_group: 0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        self.codec
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        if !(0.0..1.0).contains(&self.byzantine_fraction) {
            return bad("byzantine_fraction must be in [0, 1)");
        }
        if !(self.churn_per_year >= 0.0 && self.churn_per_year.is_finite()) {
            return bad("churn_per_year must be finite and >= 0");
        }
        if self.nodes < self.codec.r_group.max(self.replicas) {
            return bad("nodes must be at least r_group and replicas");
        }
        if !(self.years >= 0.0 && self.years.is_finite()) {
            return bad("years must be finite and >= 0");
        }
        for (name, v) in [
            ("cache_ttl_hours", self.cache_ttl_hours),
            ("heartbeat_hours", self.heartbeat_hours),
            ("liveness_hours", self.liveness_hours),
            ("repair_jitter_hours", self.repair_jitter_hours),
            ("repair_latency_hours", self.repair_latency_hours),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.replicas == 0 {
            return bad("replicas must be at least 1");
        }
        Ok(())
    }

    pub fn byzantine_count(&self) -> usize {
        (self.byzantine_fraction * self.nodes as f64).round() as usize
    }

    /// Failure rate per honest node per hour.
    pub fn churn_per_hour(&self) -> f64 {
        self.churn_per_year / HOURS_PER_YEAR
    }

    pub fn horizon_hours(&self) -> f64 {
        self.years * HOURS_PER_YEAR
    }

    /// Fragments per object-sized unit: one fragment is `1 / (k_outer * k_inner)`
    /// of the object.
    pub fn fragments_per_object(&self) -> f64 {
        (self.codec.k_outer * self.codec.k_inner) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub hours: f64,
    pub alive_honest: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// Total repair transfer in object-size units.
    pub repair_traffic: f64,
    pub fragments_transferred: u64,
    pub repairs: u64,
    pub cache_hits: u64,
    pub node_failures: u64,
    pub lost_chunks: usize,
    pub lost_objects: usize,
    pub lost_fraction: f64,
    /// Claimed storage over original object bytes, right after the initial store.
    pub storage_overhead: f64,
    pub final_storage_overhead: f64,
    /// Alive-honest fragment count of the traced group at every change.
    pub trace: Vec<TracePoint>,
}

impl Metrics {
    pub fn min_alive_honest(&self) -> Option<usize> {
        self.trace.iter().map(|p| p.alive_honest).min()
    }
}

/// Min-queue of `(time, seq)`-ordered events; the sequence number breaks
/// ties in insertion order.
struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Queued<E>>>,
    seq: u64,
}

struct Queued<E> {
    at: f64,
    seq: u64,
    ev: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, o: &Self) -> bool {
        self.seq == o.seq
    }
}
impl<E> Eq for Queued<E> {}
impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl<E> Ord for Queued<E> {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.at.total_cmp(&o.at).then(self.seq.cmp(&o.seq))
    }
}

impl<E> EventQueue<E> {
    fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }

    fn push(&mut self, at: f64, ev: E) {
        self.seq += 1;
        self.heap.push(Reverse(Queued { at, seq: self.seq, ev }));
    }

    fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse(q)| q.at)
    }

    fn pop(&mut self) -> Option<(f64, E)> {
        self.heap.pop().map(|Reverse(q)| (q.at, q.ev))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stand-in lottery output: 256 bits keyed by node and chunk.
fn prg_output(node_key: u64, chunk_key: u64) -> [u8; 32] {
    let mut r = [0u8; 32];
    let base = splitmix64(node_key ^ splitmix64(chunk_key));
    for (i, w) in r.chunks_mut(8).enumerate() {
        w.copy_from_slice(&splitmix64(base.wrapping_add(i as u64)).to_be_bytes());
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_orders_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.push(2.0, 'a');
        q.push(1.0, 'b');
        q.push(2.0, 'c');
        let order: Vec<char> = std::iter::from_fn(|| q.pop().map(|(_, e)| e)).collect();
        assert_eq!(order, vec!['b', 'a', 'c']);
    }

    #[test]
    fn default_config_is_valid() {
        assert_eq!(SimConfig::default().validate(), Ok(()));
        let c = SimConfig {
            byzantine_fraction: 1.0,
            ..SimConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn prg_output_spreads() {
        let a = prg_output(1, 2);
        assert_ne!(a, prg_output(1, 3));
        assert_ne!(a, prg_output(2, 2));
        assert_eq!(a, prg_output(1, 2));
    }
}
