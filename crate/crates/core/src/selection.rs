//! Verifiable random peer selection for chunk groups.
//!
//! A node is eligible for a chunk when its VRF output over the chunk hash
//! falls below a threshold that shrinks geometrically with the node's ring
//! distance from the chunk. Nodes within `m` distance units (a unit is the
//! mean spacing `2^256 / N`) are always eligible.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::codec::Digest256;
use crate::crypto::{node_id, vrf_verify, KeyPair, NodeId, PublicKey, VrfOutput};
use crate::scalar::Scalar;

/// Unsigned 256-bit integer, big-endian bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct U256(pub [u8; 32]);

impl U256 {
    pub const ZERO: U256 = U256([0; 32]);
    pub const MAX: U256 = U256([0xff; 32]);

    fn limbs(&self) -> [u64; 4] {
        let mut l = [0u64; 4];
        for (i, limb) in l.iter_mut().enumerate() {
            *limb = u64::from_be_bytes(self.0[i * 8..i * 8 + 8].try_into().unwrap());
        }
        l
    }

    fn from_limbs(l: [u64; 4]) -> U256 {
        let mut b = [0u8; 32];
        for (i, limb) in l.iter().enumerate() {
            b[i * 8..i * 8 + 8].copy_from_slice(&limb.to_be_bytes());
        }
        U256(b)
    }

    pub fn wrapping_sub(&self, rhs: &U256) -> U256 {
        let a = self.limbs();
        let b = rhs.limbs();
        let mut out = [0u64; 4];
        let mut borrow = false;
        for i in (0..4).rev() {
            let (v, b1) = a[i].overflowing_sub(b[i]);
            let (v, b2) = v.overflowing_sub(borrow as u64);
            out[i] = v;
            borrow = b1 || b2;
        }
        U256::from_limbs(out)
    }

    /// `x << shift` for `shift < 256`; bits shifted past the top are lost.
    pub fn from_u64_shl(x: u64, shift: u32) -> U256 {
        let mut l = [0u64; 4];
        let word = (shift / 64) as usize;
        let bit = shift % 64;
        if word < 4 {
            l[3 - word] = x << bit;
            if bit > 0 && word < 3 {
                l[2 - word] = x >> (64 - bit);
            }
        }
        U256::from_limbs(l)
    }

    /// Value divided by `2^256`, in `[0, 1)`.
    pub fn ring_fraction(&self) -> f64 {
        let hi = u128::from_be_bytes(self.0[..16].try_into().unwrap());
        let lo = u128::from_be_bytes(self.0[16..].try_into().unwrap());
        hi as f64 / 2f64.powi(128) + lo as f64 / 2f64.powi(256)
    }
}

impl Ord for U256 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.cmp(&other.0)
    }
}

impl PartialOrd for U256 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for U256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl From<&Digest256> for U256 {
    fn from(d: &Digest256) -> U256 {
        U256(d.0)
    }
}

/// Minor-arc distance between two ring positions.
pub fn ring_distance(a: &Digest256, b: &Digest256) -> U256 {
    let (a, b) = (U256::from(a), U256::from(b));
    let fwd = a.wrapping_sub(&b);
    let back = b.wrapping_sub(&a);
    fwd.min(back)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub total_nodes: usize,
    pub r_group: usize,
    /// Distance (in mean node spacings) within which every node is eligible.
    pub scale_exponent: f64,
    pub candidate_count: usize,
}

impl SelectionParams {
    pub fn new(total_nodes: usize, r_group: usize) -> SelectionParams {
        SelectionParams {
            total_nodes,
            r_group,
            scale_exponent: default_scale(r_group),
            candidate_count: (4 * r_group).min(total_nodes),
        }
    }
}

pub fn default_scale(r_group: usize) -> f64 {
    (r_group as f64 + 8.0) / 2.0
}

/// `d = ring_distance / (2^256 / N) + 1`.
pub fn distance<T: Scalar>(a: &Digest256, b: &Digest256, total_nodes: usize) -> T {
    T::of(ring_distance(a, b).ring_fraction() * total_nodes as f64 + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threshold {
    /// Every output is accepted.
    All,
    /// Outputs strictly below the bound are accepted.
    Below(U256),
}

impl Threshold {
    pub fn accepts(&self, r: &[u8; 32]) -> bool {
        match self {
            Threshold::All => true,
            Threshold::Below(t) => U256(*r) < *t,
        }
    }
}

/// Acceptance probability `min(1, 2^(m - d))` and the matching threshold
/// `floor(2^(256 + m - d))`.
pub fn eligible<T: Scalar>(d: T, scale_exponent: T) -> (T, Threshold) {
    let e = scale_exponent - d;
    if e >= T::zero() {
        return (T::one(), Threshold::All);
    }
    let p = e.exp2();
    let e = 256.0 + e.as_f64();
    if e < 0.0 {
        return (p, Threshold::Below(U256::ZERO));
    }
    // 2^e = 2^(floor e) * 2^(frac e); carry 53 significant bits.
    let whole = e.floor();
    let mant = ((e - whole).exp2() * 2f64.powi(52)) as u64;
    let t = if whole >= 52.0 {
        U256::from_u64_shl(mant, whole as u32 - 52)
    } else {
        U256::from_u64_shl(mant >> (52 - whole as u32), 0)
    };
    (p, Threshold::Below(t))
}

pub fn threshold_for(node: &NodeId, chunk_hash: &Digest256, params: &SelectionParams) -> (f64, Threshold) {
    let d: f64 = distance(node, chunk_hash, params.total_nodes);
    eligible(d, params.scale_exponent)
}

/// The lottery decision for a given output `r`.
pub fn wins_lottery(node: &NodeId, chunk_hash: &Digest256, r: &[u8; 32], params: &SelectionParams) -> bool {
    threshold_for(node, chunk_hash, params).1.accepts(r)
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SelectionProof {
    pub chunk_hash: Digest256,
    pub pk: PublicKey,
    pub vrf: VrfOutput,
}

impl SelectionProof {
    pub fn node_id(&self) -> NodeId {
        node_id(&self.pk)
    }
}

impl fmt::Debug for SelectionProof {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SelectionProof")
            .field("chunk", &self.chunk_hash)
            .field("node", &self.node_id())
            .finish()
    }
}

/// This node's proof for `chunk_hash`, or `None` when not selected.
pub fn selection_proof(keys: &KeyPair, chunk_hash: &Digest256, params: &SelectionParams) -> Option<SelectionProof> {
    let vrf = keys.vrf_prove(chunk_hash.as_bytes());
    if !wins_lottery(&keys.node_id(), chunk_hash, &vrf.r, params) {
        return None;
    }
    Some(SelectionProof {
        chunk_hash: *chunk_hash,
        pk: keys.public(),
        vrf,
    })
}

pub fn verify_selection(chunk_hash: &Digest256, proof: &SelectionProof, params: &SelectionParams) -> bool {
    proof.chunk_hash == *chunk_hash
        && wins_lottery(&proof.node_id(), chunk_hash, &proof.vrf.r, params)
        && vrf_verify(&proof.pk, chunk_hash.as_bytes(), &proof.vrf.r, &proof.vrf.proof)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PeerInfo {
    pub node_id: NodeId,
    pub address: String,
    pub pk: PublicKey,
}

impl PeerInfo {
    pub fn new(pk: PublicKey, address: impl Into<String>) -> PeerInfo {
        PeerInfo {
            node_id: node_id(&pk),
            address: address.into(),
            pk,
        }
    }
}

/// Best-effort lookup of the nodes nearest a ring position.
pub trait Directory: Send + Sync {
    /// Up to `count` peers sorted by ascending ring distance to `target`.
    fn lookup(&self, target: &Digest256, count: usize) -> Vec<PeerInfo>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sorted in-memory ring.
#[derive(Debug, Clone, Default)]
pub struct InMemoryRing {
    peers: Vec<PeerInfo>,
}

impl InMemoryRing {
    pub fn new(mut peers: Vec<PeerInfo>) -> InMemoryRing {
        peers.sort_by_key(|p| p.node_id);
        peers.dedup_by(|a, b| a.node_id == b.node_id);
        InMemoryRing { peers }
    }

    pub fn peers(&self) -> &[PeerInfo] {
        &self.peers
    }

    pub fn get(&self, id: &NodeId) -> Option<&PeerInfo> {
        self.peers
            .binary_search_by(|p| p.node_id.cmp(id))
            .ok()
            .map(|i| &self.peers[i])
    }

    pub fn insert(&mut self, peer: PeerInfo) {
        match self.peers.binary_search_by(|p| p.node_id.cmp(&peer.node_id)) {
            Ok(i) => self.peers[i] = peer,
            Err(i) => self.peers.insert(i, peer),
        }
    }

    pub fn remove(&mut self, id: &NodeId) -> Option<PeerInfo> {
        let i = self.peers.binary_search_by(|p| p.node_id.cmp(id)).ok()?;
        Some(self.peers.remove(i))
    }
}

impl Directory for InMemoryRing {
    fn lookup(&self, target: &Digest256, count: usize) -> Vec<PeerInfo> {
        let n = self.peers.len();
        let count = count.min(n);
        if count == 0 {
            return Vec::new();
        }
        // Walk outward from the insertion point in both directions.
        let start = self.peers.partition_point(|p| p.node_id < *target);
        let mut right = start % n;
        let mut left = (start + n - 1) % n;
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let rd = ring_distance(&self.peers[right].node_id, target);
            let ld = ring_distance(&self.peers[left].node_id, target);
            if rd <= ld {
                out.push(self.peers[right].clone());
                right = (right + 1) % n;
            } else {
                out.push(self.peers[left].clone());
                left = (left + n - 1) % n;
            }
        }
        out
    }

    fn len(&self) -> usize {
        self.peers.len()
    }
}

/// Membership read from a JSON list of `{node_id, address, pk}`.
#[derive(Debug, Clone, Default)]
pub struct StaticMembership {
    ring: InMemoryRing,
}

impl StaticMembership {
    pub fn from_json(s: &str) -> Result<StaticMembership, String> {
        let peers: Vec<PeerInfo> = serde_json::from_str(s).map_err(|e| e.to_string())?;
        for p in &peers {
            if node_id(&p.pk) != p.node_id {
                return Err(format!("node id {} does not match its public key", p.node_id));
            }
        }
        Ok(StaticMembership {
            ring: InMemoryRing::new(peers),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<StaticMembership, String> {
        let s = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        StaticMembership::from_json(&s)
    }

    pub fn to_json(peers: &[PeerInfo]) -> String {
        serde_json::to_string_pretty(peers).expect("peer list serializes")
    }

    pub fn peers(&self) -> &[PeerInfo] {
        self.ring.peers()
    }

    pub fn get(&self, id: &NodeId) -> Option<&PeerInfo> {
        self.ring.get(id)
    }
}

impl Directory for StaticMembership {
    fn lookup(&self, target: &Digest256, count: usize) -> Vec<PeerInfo> {
        self.ring.lookup(target, count)
    }

    fn len(&self) -> usize {
        self.ring.len()
    }
}

/// Something that can ask a peer for its selection proof.
pub trait ProofSource: Sync {
    fn request_proof(&self, peer: &PeerInfo, chunk_hash: &Digest256) -> Option<SelectionProof>;
}

#[derive(Debug, Clone)]
pub struct Located {
    pub peer: PeerInfo,
    pub proof: SelectionProof,
}

pub const DEFAULT_IN_FLIGHT: usize = 16;

/// Asks the `candidate_count` nearest peers for proofs, keeping only those
/// that verify. Results are sorted by ring distance and deduplicated.
pub fn locate(
    chunk_hash: &Digest256,
    directory: &dyn Directory,
    source: &dyn ProofSource,
    params: &SelectionParams,
    in_flight: usize,
) -> Vec<Located> {
    let candidates = directory.lookup(chunk_hash, params.candidate_count);
    let check = |peer: &PeerInfo| -> Option<Located> {
        let proof = source.request_proof(peer, chunk_hash)?;
        (proof.node_id() == peer.node_id && verify_selection(chunk_hash, &proof, params)).then(|| Located {
            peer: peer.clone(),
            proof,
        })
    };
    let mut found: Vec<Located> = if in_flight <= 1 {
        candidates.iter().filter_map(check).collect()
    } else {
        let next = Mutex::new(0usize);
        let results = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..in_flight.min(candidates.len()) {
                s.spawn(|| loop {
                    let i = {
                        let mut n = next.lock().unwrap();
                        let i = *n;
                        *n += 1;
                        i
                    };
                    let Some(peer) = candidates.get(i) else { break };
                    if let Some(l) = check(peer) {
                        results.lock().unwrap().push(l);
                    }
                });
            }
        });
        results.into_inner().unwrap()
    };
    found.sort_by(|a, b| {
        ring_distance(&a.peer.node_id, chunk_hash)
            .cmp(&ring_distance(&b.peer.node_id, chunk_hash))
            .then(a.peer.node_id.cmp(&b.peer.node_id))
    });
    let mut seen = BTreeSet::new();
    found.retain(|l| seen.insert(l.peer.node_id));
    found
}
