//! Deterministic in-memory network for running many nodes in one thread.
//!
//! Every message is framed and parsed through the wire codec, delayed by the
//! latency model and delivered in `(time, sequence)` order. A fixed seed
//! gives a byte-identical event trace.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crypto::NodeId;
use crate::protocol::{Action, Millis, Node, OpId, OpResult, Timer};

use super::wire::{decode_envelope, encode_envelope, Envelope};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_ms: Millis,
    /// Extra delay drawn uniformly from `[0, jitter_ms]`.
    pub jitter_ms: Millis,
    pub drop: f64,
}

impl LatencyModel {
    pub fn zero() -> LatencyModel {
        LatencyModel {
            base_ms: 0,
            jitter_ms: 0,
            drop: 0.0,
        }
    }
}

enum Event {
    Deliver { bytes: Vec<u8> },
    Timer { node: NodeId, timer: Timer },
}

struct Scheduled {
    at: Millis,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub bytes: u64,
}

pub struct SimNetwork {
    now: Millis,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    nodes: BTreeMap<NodeId, Node>,
    latency: LatencyModel,
    rng: ChaCha8Rng,
    trace: Sha256,
    completed: Vec<(NodeId, OpId, OpResult)>,
    stats: NetStats,
}

impl SimNetwork {
    pub fn new(latency: LatencyModel, seed: u64) -> SimNetwork {
        SimNetwork {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes: BTreeMap::new(),
            latency,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Sha256::new(),
            completed: Vec::new(),
            stats: NetStats::default(),
        }
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn set_latency(&mut self, latency: LatencyModel) {
        self.latency = latency;
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn add_node(&mut self, mut node: Node) {
        let id = node.id();
        let actions = node.start(self.now);
        self.nodes.insert(id, node);
        self.apply(id, actions);
    }

    /// Removes a node; messages to it are dropped from now on.
    pub fn kill(&mut self, id: &NodeId) -> Option<Node> {
        self.nodes.remove(id)
    }

    /// Runs `f` against a node and schedules the actions it returns.
    pub fn invoke<R>(&mut self, id: &NodeId, f: impl FnOnce(&mut Node, Millis) -> (R, Vec<Action>)) -> Option<R> {
        let now = self.now;
        let node = self.nodes.get_mut(id)?;
        let (r, actions) = f(node, now);
        self.collect(*id);
        self.apply(*id, actions);
        Some(r)
    }

    /// Digest over every delivered message: time, endpoints, type, length.
    pub fn trace_digest(&self) -> [u8; 32] {
        self.trace.clone().finalize().into()
    }

    pub fn take_completed(&mut self) -> Vec<(NodeId, OpId, OpResult)> {
        std::mem::take(&mut self.completed)
    }

    fn push(&mut self, at: Millis, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }

    fn apply(&mut self, from: NodeId, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Timer { at, timer } => self.push(at.max(self.now), Event::Timer { node: from, timer }),
                Action::Send { to, msg } => {
                    self.stats.sent += 1;
                    let bytes = encode_envelope(&Envelope::new(from, to, &msg)).expect("protocol messages fit a frame");
                    if self.latency.drop > 0.0 && self.rng.gen_bool(self.latency.drop.min(1.0)) {
                        self.stats.dropped += 1;
                        continue;
                    }
                    let jitter = if self.latency.jitter_ms > 0 {
                        self.rng.gen_range(0..=self.latency.jitter_ms)
                    } else {
                        0
                    };
                    let at = self.now + self.latency.base_ms + jitter;
                    self.push(at, Event::Deliver { bytes });
                }
            }
        }
    }

    fn collect(&mut self, id: NodeId) {
        if let Some(n) = self.nodes.get_mut(&id) {
            for (op, r) in n.take_completed() {
                self.completed.push((id, op, r));
            }
        }
    }

    pub fn next_event_time(&self) -> Option<Millis> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    /// Processes one event. Returns false when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(s)) = self.queue.pop() else {
            return false;
        };
        self.now = self.now.max(s.at);
        match s.event {
            Event::Timer { node, timer } => {
                if let Some(n) = self.nodes.get_mut(&node) {
                    let actions = n.handle_timer(self.now, timer);
                    self.collect(node);
                    self.apply(node, actions);
                }
            }
            Event::Deliver { bytes } => {
                let env = decode_envelope(&bytes).expect("frames built by this network parse");
                self.trace.update(self.now.to_be_bytes());
                self.trace.update(env.src.as_bytes());
                self.trace.update(env.dst.as_bytes());
                self.trace.update([env.msg_type]);
                self.trace.update((bytes.len() as u64).to_be_bytes());
                if let Some(n) = self.nodes.get_mut(&env.dst) {
                    self.stats.delivered += 1;
                    self.stats.bytes += bytes.len() as u64;
                    let msg = env.message().expect("payloads built by this network parse");
                    let actions = n.handle_message(self.now, env.src, msg);
                    self.collect(env.dst);
                    self.apply(env.dst, actions);
                }
            }
        }
        true
    }

    /// Processes every event up to and including `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: Millis) {
        while self.next_event_time().is_some_and(|at| at <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    /// Runs until `op` started on `node` completes or `deadline` passes.
    pub fn wait_for(&mut self, node: &NodeId, op: OpId, deadline: Millis) -> Option<OpResult> {
        loop {
            if let Some(pos) = self.completed.iter().position(|(n, o, _)| n == node && *o == op) {
                return Some(self.completed.remove(pos).2);
            }
            match self.next_event_time() {
                Some(at) if at <= deadline => {
                    self.step();
                }
                _ => {
                    self.now = self.now.max(deadline);
                    return None;
                }
            }
        }
    }

    /// Runs until `pred` holds (checked after each event) or `deadline`.
    pub fn run_until_pred(&mut self, deadline: Millis, mut pred: impl FnMut(&SimNetwork) -> bool) -> bool {
        loop {
            if pred(self) {
                return true;
            }
            match self.next_event_time() {
                Some(at) if at <= deadline => {
                    self.step();
                }
                _ => {
                    self.now = self.now.max(deadline);
                    return pred(self);
                }
            }
        }
    }
}

/// Shape of a simulated deployment for [`build_cluster`].
#[derive(Debug, Clone)]
pub struct ClusterSpec {
    pub nodes: usize,
    pub codec: crate::codec::CodecParams,
    pub heartbeat_ms: Millis,
    pub latency: LatencyModel,
    pub seed: u64,
    /// Positions (in key order) of nodes that serve no fragment data.
    pub byzantine: Vec<usize>,
}

impl ClusterSpec {
    /// Node config for this spec. Liveness and request timeouts are widened
    /// by the worst-case delay so slow links are not mistaken for failures.
    pub fn node_config(&self) -> crate::protocol::NodeConfig {
        let worst = self.latency.base_ms + self.latency.jitter_ms;
        let mut cfg = crate::protocol::NodeConfig::with_heartbeat(self.heartbeat_ms, self.codec, self.nodes);
        cfg.request_timeout_ms = 2 * worst + 2 * self.heartbeat_ms;
        cfg.liveness_timeout_ms = 3 * self.heartbeat_ms + 2 * worst;
        cfg.seed = self.seed;
        cfg
    }

    /// Upper bound on noticing a departed member: its last claim may still be
    /// in flight, then the liveness timeout runs out.
    pub fn detection_ms(&self) -> Millis {
        self.latency.base_ms + self.latency.jitter_ms + self.node_config().liveness_timeout_ms
    }

    /// Upper bound on one repair round: heartbeat granularity and the jitter
    /// window, then a locate, a cache probe and a fragment fetch (each bounded
    /// by the request timeout), then the first claim.
    pub fn repair_round_ms(&self) -> Millis {
        let worst = self.latency.base_ms + self.latency.jitter_ms;
        let cfg = self.node_config();
        cfg.heartbeat_ms + cfg.repair_jitter_ms + 3 * cfg.request_timeout_ms + worst
    }
}

pub fn cluster_keys(n: usize, seed: u64) -> Vec<crate::crypto::KeyPair> {
    (0..n)
        .map(|i| {
            let mut s = [0u8; 32];
            s[..8].copy_from_slice(&(i as u64).to_le_bytes());
            s[8..16].copy_from_slice(&seed.to_le_bytes());
            crate::crypto::KeyPair::from_seed(s)
        })
        .collect()
}

/// Builds and starts a cluster; returns node ids in key order.
pub fn build_cluster(spec: &ClusterSpec) -> (SimNetwork, Vec<NodeId>) {
    use crate::selection::{InMemoryRing, PeerInfo};
    let keys = cluster_keys(spec.nodes, spec.seed);
    let ring = std::sync::Arc::new(InMemoryRing::new(
        keys.iter().map(|k| PeerInfo::new(k.public(), "sim")).collect(),
    ));
    let cfg = spec.node_config();
    let mut net = SimNetwork::new(spec.latency, spec.seed);
    let mut ids = Vec::with_capacity(keys.len());
    for (i, k) in keys.into_iter().enumerate() {
        let mut c = cfg.clone();
        c.byzantine = spec.byzantine.contains(&i);
        ids.push(k.node_id());
        net.add_node(Node::new(k, c, ring.clone()));
    }
    (net, ids)
}
