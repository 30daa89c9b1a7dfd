use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    inner_decode, inner_encode, outer_decode, outer_encode, outer_encode_ordinal, outer_indices, Chunk, CodecError,
    Digest256, Fragment, OUTER_INDEX_BASE,
};
use crate::crypto::{verify_claim, KeyPair, NodeId, VrfOutput};
use crate::selection::{ring_distance, selection_proof, verify_selection, Directory, SelectionProof};

use super::messages::*;
use super::view::{GroupView, MemberReport, ViewReport};
use super::{Action, Millis, NodeConfig, ObjectRecipe, OpId, OpResult, Timer};

const FETCH_ATTEMPTS: u8 = 3;

/// Counters exposed for tests, the simulator and operators.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    pub fragments_stored: u64,
    pub fragments_served: u64,
    /// Fragments received to decode a chunk during repair.
    pub repair_fragments_fetched: u64,
    /// Fragments received from a cache holder during repair.
    pub repair_cache_hits: u64,
    pub cache_fragments_served: u64,
    pub repair_requests_sent: u64,
    pub joins_completed: u64,
    pub claims_sent: u64,
    pub claims_accepted: u64,
    pub claims_rejected: u64,
    pub evictions: u64,
}

struct Stored {
    fragment: Fragment,
    proof: SelectionProof,
    received_at: Millis,
    expiration: u64,
}

struct Cached {
    data: Vec<u8>,
    expires: Millis,
}

#[derive(Clone, Copy)]
enum LocatePurpose {
    Store { op: OpId, slot: usize },
    Query { op: OpId, slot: usize },
    Repair,
    Sync,
    Evict { op: OpId },
    View { op: OpId },
}

struct Found {
    peer: NodeId,
    proof: SelectionProof,
    stored_index: Option<u64>,
    stored_at: Option<u64>,
}

struct Locate {
    chunk: Digest256,
    purpose: LocatePurpose,
    waiting: usize,
    found: Vec<Found>,
}

#[derive(Clone, Copy)]
enum Fetch {
    Query { op: OpId, slot: usize },
    Join { chunk: Digest256 },
}

enum Pending {
    Proof { locate: u64, peer: NodeId },
    Store { op: OpId, slot: usize, peer: NodeId, index: u64 },
    Get { fetch: Fetch, peer: NodeId, attempt: u8 },
    Cache { chunk: Digest256 },
}

#[derive(PartialEq)]
enum StoreState {
    Locating,
    Sending,
    Done,
    Abandoned,
}

struct StoreSlot {
    ordinal: usize,
    chunk: Chunk,
    hash: Digest256,
    rounds: u32,
    state: StoreState,
    candidates: VecDeque<NodeId>,
    tried: BTreeSet<NodeId>,
    stored: BTreeMap<NodeId, (u64, SelectionProof)>,
    inflight: usize,
    free_indices: Vec<u64>,
    next_index: u64,
}

struct StoreJob {
    object: Vec<u8>,
    secret: Vec<u8>,
    expiration: u64,
    slots: Vec<StoreSlot>,
    next_ordinal: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum QueryState {
    Locating,
    Fetching,
    Decoded,
    Failed(String),
}

struct QuerySlot {
    hash: Digest256,
    stream_index: u64,
    rounds: u32,
    state: QueryState,
    holders: VecDeque<(NodeId, u8)>,
    frags: Vec<Fragment>,
    inflight: usize,
    data: Vec<u8>,
}

struct QueryJob {
    recipe: ObjectRecipe,
    slots: Vec<QuerySlot>,
}

enum JoinPhase {
    Cache { waiting: usize },
    Fetch,
}

struct Join {
    chunk_len: u64,
    expiration: u64,
    index: u64,
    proof: SelectionProof,
    view: GroupView,
    phase: JoinPhase,
    holders: VecDeque<(NodeId, u8)>,
    frags: Vec<Fragment>,
    inflight: usize,
}

/// One storage node.
pub struct Node {
    keys: KeyPair,
    id: NodeId,
    cfg: NodeConfig,
    dir: Arc<dyn Directory>,
    rng: ChaCha8Rng,
    next_id: u64,
    store: BTreeMap<Digest256, Stored>,
    views: BTreeMap<Digest256, GroupView>,
    cache: BTreeMap<Digest256, Cached>,
    evicted: BTreeMap<Digest256, u64>,
    bootstrapped: BTreeSet<Digest256>,
    repair_block: BTreeMap<Digest256, Millis>,
    own_proofs: BTreeMap<Digest256, Option<SelectionProof>>,
    verified: BTreeMap<(Digest256, NodeId), VrfOutput>,
    locates: BTreeMap<u64, Locate>,
    pending: BTreeMap<ReqId, Pending>,
    joins: BTreeMap<Digest256, Join>,
    stores: BTreeMap<OpId, StoreJob>,
    queries: BTreeMap<OpId, QueryJob>,
    completed: Vec<(OpId, OpResult)>,
    stats: NodeStats,
    out: Vec<Action>,
    self_queue: VecDeque<Message>,
}

impl Node {
    pub fn new(keys: KeyPair, cfg: NodeConfig, dir: Arc<dyn Directory>) -> Node {
        let id = keys.node_id();
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&cfg.seed.to_le_bytes());
        for (s, b) in seed[8..].iter_mut().zip(id.0) {
            *s = b;
        }
        Node {
            keys,
            id,
            cfg,
            dir,
            rng: ChaCha8Rng::from_seed(seed),
            next_id: 1,
            store: BTreeMap::new(),
            views: BTreeMap::new(),
            cache: BTreeMap::new(),
            evicted: BTreeMap::new(),
            bootstrapped: BTreeSet::new(),
            repair_block: BTreeMap::new(),
            own_proofs: BTreeMap::new(),
            verified: BTreeMap::new(),
            locates: BTreeMap::new(),
            pending: BTreeMap::new(),
            joins: BTreeMap::new(),
            stores: BTreeMap::new(),
            queries: BTreeMap::new(),
            completed: Vec::new(),
            stats: NodeStats::default(),
            out: Vec::new(),
            self_queue: VecDeque::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn is_byzantine(&self) -> bool {
        self.cfg.byzantine
    }

    pub fn stored_chunks(&self) -> Vec<Digest256> {
        self.store.keys().copied().collect()
    }

    pub fn stored_index(&self, chunk: &Digest256) -> Option<u64> {
        self.store.get(chunk).map(|s| s.fragment.stream_index)
    }

    pub fn view(&self, chunk: &Digest256) -> Option<&GroupView> {
        self.views.get(chunk)
    }

    pub fn alive_count(&self, chunk: &Digest256, now: Millis) -> usize {
        self.views
            .get(chunk)
            .map_or(0, |v| v.alive_count(now, self.cfg.liveness_timeout_ms))
    }

    pub fn has_cached(&self, chunk: &Digest256) -> bool {
        self.cache.contains_key(chunk)
    }

    pub fn take_completed(&mut self) -> Vec<(OpId, OpResult)> {
        std::mem::take(&mut self.completed)
    }

    /// Arms the periodic timers. Call once.
    pub fn start(&mut self, now: Millis) -> Vec<Action> {
        let hb = self.rng.gen_range(0..=self.cfg.heartbeat_ms);
        let sync = self.cfg.sync_interval_ms + self.rng.gen_range(0..=self.cfg.heartbeat_ms);
        self.timer(now + hb, Timer::Heartbeat);
        self.timer(now + sync, Timer::Sync);
        self.drain(now)
    }

    pub fn handle_message(&mut self, now: Millis, from: NodeId, msg: Message) -> Vec<Action> {
        self.dispatch(now, from, msg);
        self.drain(now)
    }

    pub fn handle_timer(&mut self, now: Millis, timer: Timer) -> Vec<Action> {
        match timer {
            Timer::Heartbeat => {
                self.heartbeat(now);
                self.timer(now + self.cfg.heartbeat_ms, Timer::Heartbeat);
            }
            Timer::Sync => {
                for chunk in self.store.keys().copied().collect::<Vec<_>>() {
                    self.start_locate(now, chunk, LocatePurpose::Sync);
                }
                self.timer(now + self.cfg.sync_interval_ms, Timer::Sync);
            }
            Timer::StartRepair(chunk) => self.start_repair(now, chunk),
            Timer::Request(req) => {
                if let Some(p) = self.pending.remove(&req) {
                    self.request_failed(now, p);
                }
            }
        }
        self.drain(now)
    }

    /// Starts storing `object`; completion is reported via `take_completed`.
    pub fn begin_store(&mut self, now: Millis, object: Vec<u8>, secret: Vec<u8>, expiration: u64) -> (OpId, Vec<Action>) {
        let op = self.fresh_id();
        let chunks = match outer_encode(&object, &secret, &self.cfg.codec) {
            Ok(c) => c,
            Err(e) => {
                self.completed.push((op, OpResult::Failed(format!("encode: {e}"))));
                return (op, Vec::new());
            }
        };
        let slots = chunks
            .into_iter()
            .enumerate()
            .map(|(ordinal, chunk)| StoreSlot::new(ordinal, chunk))
            .collect::<Vec<_>>();
        let n = slots.len();
        self.stores.insert(
            op,
            StoreJob {
                object,
                secret,
                expiration,
                slots,
                next_ordinal: n,
            },
        );
        for slot in 0..n {
            let chunk = self.stores[&op].slots[slot].hash;
            self.start_locate(now, chunk, LocatePurpose::Store { op, slot });
        }
        (op, self.drain(now))
    }

    /// Starts retrieving the object described by `recipe`.
    pub fn begin_query(&mut self, now: Millis, recipe: ObjectRecipe, secret: &[u8]) -> (OpId, Vec<Action>) {
        let op = self.fresh_id();
        if let Err(e) = recipe.validate() {
            self.completed.push((op, OpResult::Failed(format!("bad recipe: {e}"))));
            return (op, Vec::new());
        }
        let max_ord = recipe.chunk_ordinals.iter().copied().max().unwrap_or(0);
        let indices = outer_indices(secret, &recipe.object_hash, max_ord + 1);
        let slots = recipe
            .chunk_hashes
            .iter()
            .zip(&recipe.chunk_ordinals)
            .map(|(h, &o)| QuerySlot {
                hash: *h,
                stream_index: indices[o],
                rounds: 0,
                state: QueryState::Locating,
                holders: VecDeque::new(),
                frags: Vec::new(),
                inflight: 0,
                data: Vec::new(),
            })
            .collect::<Vec<_>>();
        let n = slots.len();
        self.queries.insert(op, QueryJob { recipe, slots });
        for slot in 0..n {
            let chunk = self.queries[&op].slots[slot].hash;
            self.start_locate(now, chunk, LocatePurpose::Query { op, slot });
        }
        self.check_query(now, op);
        (op, self.drain(now))
    }

    /// Asks the oldest holder of `chunk` to drop its fragment.
    pub fn begin_evict(&mut self, now: Millis, chunk: Digest256) -> (OpId, Vec<Action>) {
        let op = self.fresh_id();
        self.start_locate(now, chunk, LocatePurpose::Evict { op });
        (op, self.drain(now))
    }

    /// Reports this node's view of `chunk`, or the located holders when the
    /// node is not a member.
    pub fn begin_view(&mut self, now: Millis, chunk: Digest256) -> (OpId, Vec<Action>) {
        let op = self.fresh_id();
        if self.store.contains_key(&chunk) {
            let report = self.view_report(now, &chunk);
            self.completed.push((op, OpResult::View(report)));
        } else {
            self.start_locate(now, chunk, LocatePurpose::View { op });
        }
        (op, self.drain(now))
    }

    /// Drops this node's fragment of `chunk` as if told to by an operator.
    pub fn force_evict(&mut self, chunk: &Digest256) {
        if let Some(s) = self.store.remove(chunk) {
            self.evicted.insert(*chunk, s.expiration);
            self.views.remove(chunk);
            self.cache.remove(chunk);
            self.bootstrapped.remove(chunk);
            self.repair_block.remove(chunk);
            self.stats.evictions += 1;
        }
    }

    pub fn view_report(&self, now: Millis, chunk: &Digest256) -> ViewReport {
        let lt = self.cfg.liveness_timeout_ms;
        match self.views.get(chunk) {
            Some(v) => ViewReport {
                chunk_hash: *chunk,
                reporter: self.id,
                is_member: self.store.contains_key(chunk),
                alive: v.alive_count(now, lt),
                members: v
                    .members
                    .iter()
                    .map(|(id, m)| MemberReport {
                        node_id: *id,
                        fragment_index: m.fragment_index,
                        alive: now.saturating_sub(m.last_claim) <= lt,
                        age_ms: now.saturating_sub(m.first_seen),
                        since_claim_ms: now.saturating_sub(m.last_claim),
                    })
                    .collect(),
            },
            None => ViewReport {
                chunk_hash: *chunk,
                reporter: self.id,
                is_member: false,
                alive: 0,
                members: Vec::new(),
            },
        }
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn timer(&mut self, at: Millis, timer: Timer) {
        self.out.push(Action::Timer { at, timer });
    }

    fn send(&mut self, to: NodeId, msg: Message) {
        if to == self.id {
            self.self_queue.push_back(msg);
        } else {
            self.out.push(Action::Send { to, msg });
        }
    }

    fn request(&mut self, now: Millis, to: NodeId, pending: Pending, build: impl FnOnce(ReqId) -> Message) {
        let req = self.fresh_id();
        self.pending.insert(req, pending);
        self.timer(now + self.cfg.request_timeout_ms, Timer::Request(req));
        self.send(to, build(req));
    }

    fn drain(&mut self, now: Millis) -> Vec<Action> {
        while let Some(msg) = self.self_queue.pop_front() {
            self.dispatch(now, self.id, msg);
        }
        std::mem::take(&mut self.out)
    }

    fn own_proof(&mut self, chunk: &Digest256) -> Option<SelectionProof> {
        if let Some(p) = self.own_proofs.get(chunk) {
            return p.clone();
        }
        let p = selection_proof(&self.keys, chunk, &self.cfg.selection);
        self.own_proofs.insert(*chunk, p.clone());
        p
    }

    /// Verifies a peer's selection proof, remembering accepted outputs.
    fn check_proof(&mut self, chunk: &Digest256, proof: &SelectionProof) -> bool {
        let key = (*chunk, proof.node_id());
        if let Some(v) = self.verified.get(&key) {
            return *v == proof.vrf;
        }
        let ok = verify_selection(chunk, proof, &self.cfg.selection);
        if ok {
            self.verified.insert(key, proof.vrf.clone());
        }
        ok
    }

    fn dispatch(&mut self, now: Millis, from: NodeId, msg: Message) {
        match msg {
            Message::StoreFragment(m) => self.on_store_fragment(now, from, m),
            Message::StoreAck(m) => self.on_store_ack(now, from, m),
            Message::GetFragment(m) => self.on_get_fragment(from, m),
            Message::FragmentData(m) => self.on_fragment_data(now, from, m),
            Message::ProofRequest(m) => self.on_proof_request(from, m),
            Message::ProofResponse(m) => self.on_proof_response(now, from, m),
            Message::PersistenceClaim(m) => self.on_claim(now, from, m),
            Message::RepairRequest(m) => self.on_repair_request(now, from, m),
            Message::ChunkCacheRequest(m) => self.on_cache_request(from, m),
            Message::ChunkCacheResponse(m) => self.on_cache_response(now, from, m),
            Message::MembershipPush(m) => self.on_membership_push(now, m),
            Message::EvictMember(m) => self.force_evict(&m.chunk_hash),
        }
    }

    fn request_failed(&mut self, now: Millis, p: Pending) {
        match p {
            Pending::Proof { locate, .. } => self.locate_step(now, locate, None),
            Pending::Store { op, slot, index, .. } => {
                if let Some(s) = self.store_slot(op, slot) {
                    s.inflight -= 1;
                    s.free_indices.push(index);
                }
                self.pump_store(now, op, slot);
            }
            Pending::Get { fetch, peer, attempt } => {
                // Silence may be a lost message; give the peer another turn.
                if attempt + 1 < FETCH_ATTEMPTS {
                    if let Some((holders, ..)) = self.fetch_state(fetch) {
                        holders.push_back((peer, attempt + 1));
                    }
                }
                self.fetch_result(now, fetch, None)
            }
            Pending::Cache { chunk } => self.cache_miss(now, chunk),
        }
    }

    // ---- server side ----

    fn on_store_fragment(&mut self, now: Millis, from: NodeId, m: StoreFragment) {
        let chunk = m.fragment.chunk_hash;
        let index = m.fragment.stream_index;
        let reject = |reason: &str| {
            Message::StoreAck(StoreAck {
                req: m.req,
                chunk_hash: chunk,
                stream_index: index,
                result: AckResult::Rejected(reason.to_string()),
            })
        };
        if self.evicted.contains_key(&chunk) {
            let msg = reject("evicted");
            self.send(from, msg);
            return;
        }
        let Some(proof) = self.own_proof(&chunk) else {
            let msg = reject("not selected");
            self.send(from, msg);
            return;
        };
        if let Some(s) = self.store.get(&chunk) {
            if s.fragment.stream_index != index {
                let msg = reject("already storing another fragment of this chunk");
                self.send(from, msg);
                return;
            }
        } else {
            if self.store.len() >= self.cfg.max_fragments {
                let msg = reject("storage full");
                self.send(from, msg);
                return;
            }
            self.store.insert(
                chunk,
                Stored {
                    fragment: m.fragment,
                    proof: proof.clone(),
                    received_at: now,
                    expiration: m.expiration,
                },
            );
            self.stats.fragments_stored += 1;
            let mut view = GroupView::new(chunk);
            view.upsert(index, proof.clone(), now);
            self.views.insert(chunk, view);
        }
        self.send(
            from,
            Message::StoreAck(StoreAck {
                req: m.req,
                chunk_hash: chunk,
                stream_index: index,
                result: AckResult::Stored(proof),
            }),
        );
    }

    fn on_get_fragment(&mut self, from: NodeId, m: GetFragment) {
        let fragment = if self.cfg.byzantine {
            None
        } else {
            self.store.get(&m.chunk_hash).map(|s| s.fragment.clone())
        };
        if fragment.is_some() {
            self.stats.fragments_served += 1;
        }
        self.send(
            from,
            Message::FragmentData(FragmentData {
                req: m.req,
                chunk_hash: m.chunk_hash,
                fragment,
            }),
        );
    }

    fn on_proof_request(&mut self, from: NodeId, m: ProofRequest) {
        // An evicted node sits out until the fragment would have expired.
        let proof = if self.evicted.contains_key(&m.chunk_hash) {
            None
        } else {
            self.own_proof(&m.chunk_hash)
        };
        let stored = self.store.get(&m.chunk_hash);
        let msg = Message::ProofResponse(ProofResponse {
            req: m.req,
            chunk_hash: m.chunk_hash,
            proof,
            stored_index: stored.map(|s| s.fragment.stream_index),
            stored_at: stored.map(|s| s.received_at),
        });
        self.send(from, msg);
    }

    fn on_cache_request(&mut self, from: NodeId, m: ChunkCacheRequest) {
        let fragment = match self.cache.get(&m.chunk_hash) {
            Some(c) if !self.cfg.byzantine => {
                Some(inner_encode(&c.data, m.chunk_hash, m.stream_index, self.cfg.codec.k_inner))
            }
            _ => None,
        };
        if fragment.is_some() {
            self.stats.cache_fragments_served += 1;
        }
        self.send(
            from,
            Message::ChunkCacheResponse(ChunkCacheResponse {
                req: m.req,
                chunk_hash: m.chunk_hash,
                fragment,
            }),
        );
    }

    fn on_claim(&mut self, now: Millis, from: NodeId, c: PersistenceClaim) {
        if !self.store.contains_key(&c.chunk_hash) {
            return;
        }
        let valid = c.proof.pk == c.sender_pk
            && c.sender_pk.node_id() == from
            && verify_claim(&c.sender_pk, &c.payload(), &c.signature)
            && self.check_proof(&c.chunk_hash, &c.proof);
        if !valid {
            self.stats.claims_rejected += 1;
            return;
        }
        let view = self.views.entry(c.chunk_hash).or_insert_with(|| GroupView::new(c.chunk_hash));
        if view.members.get(&from).is_some_and(|m| c.timestamp <= m.claim_ts) {
            return;
        }
        view.upsert(c.stream_index, c.proof, now);
        if let Some(m) = view.members.get_mut(&from) {
            m.claim_ts = c.timestamp;
            m.last_claim = now;
        }
        self.stats.claims_accepted += 1;
    }

    fn on_membership_push(&mut self, now: Millis, m: MembershipPush) {
        if !self.store.contains_key(&m.chunk_hash) {
            return;
        }
        self.merge_records(now, &m.chunk_hash, &m.view);
        self.bootstrapped.insert(m.chunk_hash);
    }

    fn merge_records(&mut self, now: Millis, chunk: &Digest256, records: &[MemberRecord]) {
        for r in records {
            if self.check_proof(chunk, &r.proof) {
                let view = self.views.entry(*chunk).or_insert_with(|| GroupView::new(*chunk));
                view.upsert(r.fragment_index, r.proof.clone(), now);
            }
        }
    }

    fn claim_for(&mut self, now: Millis, chunk: &Digest256) -> Option<PersistenceClaim> {
        let s = self.store.get(chunk)?;
        let pk = self.keys.public();
        let payload = PersistenceClaim::signed_payload(chunk, s.fragment.stream_index, &pk, &s.proof, now);
        Some(PersistenceClaim {
            chunk_hash: *chunk,
            stream_index: s.fragment.stream_index,
            sender_pk: pk,
            proof: s.proof.clone(),
            timestamp: now,
            signature: self.keys.sign(&payload),
        })
    }

    fn heartbeat(&mut self, now: Millis) {
        let expired: Vec<Digest256> = self
            .store
            .iter()
            .filter(|(_, s)| s.expiration.saturating_mul(1000) <= now)
            .map(|(h, _)| *h)
            .collect();
        for h in expired {
            self.store.remove(&h);
            self.views.remove(&h);
            self.bootstrapped.remove(&h);
        }
        self.cache.retain(|_, c| c.expires > now);
        self.evicted.retain(|_, exp| exp.saturating_mul(1000) > now);

        let lt = self.cfg.liveness_timeout_ms;
        for chunk in self.store.keys().copied().collect::<Vec<_>>() {
            let Some(claim) = self.claim_for(now, &chunk) else { continue };
            let view = self.views.entry(chunk).or_insert_with(|| GroupView::new(chunk));
            view.expire(now, lt, &self.id);
            if let Some(me) = view.members.get_mut(&self.id) {
                me.last_claim = now;
            }
            let peers: Vec<NodeId> = view.members.keys().filter(|id| **id != self.id).copied().collect();
            let alive = view.alive_count(now, lt);
            for p in peers {
                self.stats.claims_sent += 1;
                self.send(p, Message::PersistenceClaim(claim.clone()));
            }
            if alive < self.cfg.codec.r_group
                && self.bootstrapped.contains(&chunk)
                && self.repair_block.get(&chunk).is_none_or(|t| *t <= now)
            {
                let at = now + self.rng.gen_range(0..=self.cfg.repair_jitter_ms);
                self.repair_block
                    .insert(chunk, at + 2 * self.cfg.request_timeout_ms + self.cfg.heartbeat_ms);
                self.timer(at, Timer::StartRepair(chunk));
            }
        }
    }

    // ---- locate ----

    fn start_locate(&mut self, now: Millis, chunk: Digest256, purpose: LocatePurpose) {
        let candidates = self.dir.lookup(&chunk, self.cfg.selection.candidate_count);
        let lid = self.fresh_id();
        self.locates.insert(
            lid,
            Locate {
                chunk,
                purpose,
                waiting: candidates.len(),
                found: Vec::new(),
            },
        );
        if candidates.is_empty() {
            self.finish_locate(now, lid);
            return;
        }
        for peer in candidates {
            let to = peer.node_id;
            self.request(now, to, Pending::Proof { locate: lid, peer: to }, |req| {
                Message::ProofRequest(ProofRequest { req, chunk_hash: chunk })
            });
        }
    }

    fn on_proof_response(&mut self, now: Millis, from: NodeId, m: ProofResponse) {
        let Some(Pending::Proof { locate, peer }) = self.pending.remove(&m.req) else {
            return;
        };
        let chunk = self.locates.get(&locate).map(|l| l.chunk);
        let found = match (m.proof, chunk) {
            (Some(proof), Some(chunk))
                if peer == from && m.chunk_hash == chunk && proof.node_id() == from && self.check_proof(&chunk, &proof) =>
            {
                Some(Found {
                    peer,
                    proof,
                    stored_index: m.stored_index,
                    stored_at: m.stored_at,
                })
            }
            _ => None,
        };
        self.locate_step(now, locate, found);
    }

    fn locate_step(&mut self, now: Millis, lid: u64, found: Option<Found>) {
        let Some(l) = self.locates.get_mut(&lid) else { return };
        l.waiting -= 1;
        if let Some(f) = found {
            l.found.push(f);
        }
        if l.waiting == 0 {
            self.finish_locate(now, lid);
        }
    }

    fn finish_locate(&mut self, now: Millis, lid: u64) {
        let Some(mut l) = self.locates.remove(&lid) else { return };
        let chunk = l.chunk;
        l.found.sort_by(|a, b| {
            ring_distance(&a.peer, &chunk)
                .cmp(&ring_distance(&b.peer, &chunk))
                .then(a.peer.cmp(&b.peer))
        });
        l.found.dedup_by(|a, b| a.peer == b.peer);
        match l.purpose {
            LocatePurpose::Store { op, slot } => self.store_located(now, op, slot, l.found),
            LocatePurpose::Query { op, slot } => self.query_located(now, op, slot, l.found),
            LocatePurpose::Repair => self.repair_located(now, chunk, l.found),
            LocatePurpose::Sync => self.sync_located(now, chunk, l.found),
            LocatePurpose::Evict { op } => self.evict_located(op, chunk, l.found),
            LocatePurpose::View { op } => {
                let report = ViewReport {
                    chunk_hash: chunk,
                    reporter: self.id,
                    is_member: false,
                    alive: l.found.iter().filter(|f| f.stored_index.is_some()).count(),
                    members: l
                        .found
                        .iter()
                        .filter_map(|f| {
                            Some(MemberReport {
                                node_id: f.peer,
                                fragment_index: f.stored_index?,
                                alive: true,
                                age_ms: 0,
                                since_claim_ms: 0,
                            })
                        })
                        .collect(),
                };
                self.completed.push((op, OpResult::View(report)));
            }
        }
    }

    // ---- client store ----

    fn store_slot(&mut self, op: OpId, slot: usize) -> Option<&mut StoreSlot> {
        self.stores.get_mut(&op)?.slots.get_mut(slot)
    }

    fn store_located(&mut self, now: Millis, op: OpId, slot: usize, found: Vec<Found>) {
        let r = self.cfg.codec.r_group;
        let Some(s) = self.store_slot(op, slot) else { return };
        let fresh: Vec<NodeId> = found
            .iter()
            .filter(|f| f.stored_index.is_none() && !s.tried.contains(&f.peer) && !s.stored.contains_key(&f.peer))
            .map(|f| f.peer)
            .collect();
        if fresh.len() + s.stored.len() < r {
            self.store_round_failed(now, op, slot);
            return;
        }
        s.candidates = fresh.into();
        s.state = StoreState::Sending;
        self.pump_store(now, op, slot);
    }

    fn store_round_failed(&mut self, now: Millis, op: OpId, slot: usize) {
        let rounds = self.cfg.locate_rounds;
        let Some(s) = self.store_slot(op, slot) else { return };
        s.rounds += 1;
        if s.rounds < rounds {
            s.state = StoreState::Locating;
            let hash = s.hash;
            self.start_locate(now, hash, LocatePurpose::Store { op, slot });
        } else {
            s.state = StoreState::Abandoned;
            self.replace_chunk(now, op);
        }
    }

    /// Materializes the next outer ordinal in place of an abandoned chunk.
    fn replace_chunk(&mut self, now: Millis, op: OpId) {
        let params = self.cfg.codec;
        let Some(job) = self.stores.get_mut(&op) else { return };
        if job.next_ordinal >= 2 * params.n_chunks {
            let progress: Vec<String> = job
                .slots
                .iter()
                .map(|s| format!("ordinal {} stored {}/{}", s.ordinal, s.stored.len(), params.r_group))
                .collect();
            self.stores.remove(&op);
            self.completed.push((
                op,
                OpResult::Failed(format!("store failed: not enough willing peers ({})", progress.join(", "))),
            ));
            return;
        }
        let ordinal = job.next_ordinal;
        job.next_ordinal += 1;
        let chunk = outer_encode_ordinal(&job.object, &job.secret, &params, ordinal);
        job.slots.push(StoreSlot::new(ordinal, chunk));
        let slot = job.slots.len() - 1;
        let hash = job.slots[slot].hash;
        self.start_locate(now, hash, LocatePurpose::Store { op, slot });
    }

    fn pump_store(&mut self, now: Millis, op: OpId, slot: usize) {
        let r = self.cfg.codec.r_group;
        let k = self.cfg.codec.k_inner;
        loop {
            let Some(job) = self.stores.get_mut(&op) else { return };
            let expiration = job.expiration;
            let s = &mut job.slots[slot];
            if s.state != StoreState::Sending {
                return;
            }
            if s.stored.len() >= r {
                s.state = StoreState::Done;
                let view: Vec<MemberRecord> = s
                    .stored
                    .values()
                    .map(|(idx, proof)| MemberRecord {
                        fragment_index: *idx,
                        proof: proof.clone(),
                    })
                    .collect();
                let hash = s.hash;
                let members: Vec<NodeId> = s.stored.keys().copied().collect();
                for m in members {
                    self.send(
                        m,
                        Message::MembershipPush(MembershipPush {
                            chunk_hash: hash,
                            view: view.clone(),
                        }),
                    );
                }
                self.check_store(op);
                return;
            }
            if s.stored.len() + s.inflight >= r {
                return;
            }
            let Some(peer) = s.candidates.pop_front() else {
                if s.inflight == 0 {
                    self.store_round_failed(now, op, slot);
                }
                return;
            };
            s.tried.insert(peer);
            let index = s.free_indices.pop().unwrap_or_else(|| {
                let i = s.next_index;
                s.next_index += 1;
                i
            });
            s.inflight += 1;
            let fragment = inner_encode(&s.chunk.data, s.hash, index, k);
            self.request(now, peer, Pending::Store { op, slot, peer, index }, |req| {
                Message::StoreFragment(StoreFragment {
                    req,
                    fragment,
                    expiration,
                })
            });
        }
    }

    fn on_store_ack(&mut self, now: Millis, from: NodeId, m: StoreAck) {
        let Some(Pending::Store { op, slot, peer, index }) = self.pending.remove(&m.req) else {
            return;
        };
        let ok = match &m.result {
            AckResult::Stored(proof) => {
                peer == from && m.stream_index == index && proof.node_id() == from && {
                    let hash = self.stores.get(&op).map(|j| j.slots[slot].hash);
                    hash.is_some_and(|h| h == m.chunk_hash) && self.check_proof(&m.chunk_hash, proof)
                }
            }
            AckResult::Rejected(_) => false,
        };
        let Some(s) = self.store_slot(op, slot) else { return };
        s.inflight -= 1;
        if ok {
            if let AckResult::Stored(proof) = m.result {
                s.stored.insert(peer, (index, proof));
            }
        } else {
            s.free_indices.push(index);
        }
        self.pump_store(now, op, slot);
    }

    fn check_store(&mut self, op: OpId) {
        let n = self.cfg.codec.n_chunks;
        let Some(job) = self.stores.get(&op) else { return };
        let done: Vec<&StoreSlot> = job.slots.iter().filter(|s| s.state == StoreState::Done).collect();
        if done.len() < n {
            return;
        }
        let recipe = ObjectRecipe {
            object_hash: crate::codec::content_hash(&job.object),
            chunk_hashes: done.iter().take(n).map(|s| s.hash).collect(),
            chunk_ordinals: done.iter().take(n).map(|s| s.ordinal).collect(),
            expiration: job.expiration,
            params: self.cfg.codec,
        };
        self.stores.remove(&op);
        self.completed.push((op, OpResult::Stored(recipe)));
    }

    // ---- client query ----

    fn query_located(&mut self, now: Millis, op: OpId, slot: usize, found: Vec<Found>) {
        let rounds = self.cfg.locate_rounds;
        let Some(job) = self.queries.get_mut(&op) else { return };
        let s = &mut job.slots[slot];
        let have: BTreeSet<u64> = s.frags.iter().map(|f| f.stream_index).collect();
        s.holders = found
            .iter()
            .filter(|f| f.stored_index.is_some_and(|i| !have.contains(&i)))
            .map(|f| (f.peer, 0))
            .collect();
        if s.holders.len() + s.frags.len() < self.cfg.codec.k_inner {
            s.rounds += 1;
            if s.rounds < rounds {
                let hash = s.hash;
                self.start_locate(now, hash, LocatePurpose::Query { op, slot });
                return;
            }
            if s.holders.is_empty() && s.frags.is_empty() {
                s.state = QueryState::Failed("no holders found".into());
                self.check_query(now, op);
                return;
            }
        }
        s.state = QueryState::Fetching;
        self.pump_fetch(now, Fetch::Query { op, slot });
    }

    fn check_query(&mut self, now: Millis, op: OpId) {
        let _ = now;
        let params = self.cfg.codec;
        let Some(job) = self.queries.get(&op) else { return };
        let decoded: Vec<(u64, &[u8])> = job
            .slots
            .iter()
            .filter(|s| s.state == QueryState::Decoded)
            .map(|s| (s.stream_index, s.data.as_slice()))
            .collect();
        let active = job
            .slots
            .iter()
            .filter(|s| matches!(s.state, QueryState::Locating | QueryState::Fetching))
            .count();
        let result = if decoded.len() >= params.k_outer {
            match outer_decode(&decoded, &params, Some(&job.recipe.object_hash)) {
                Ok(obj) => Some(OpResult::Object(obj)),
                Err(CodecError::NeedMoreSymbols { .. }) if active > 0 => None,
                Err(e) => Some(OpResult::Failed(format!("object unavailable: {e}"))),
            }
        } else if decoded.len() + active < params.k_outer {
            let status: Vec<String> = job
                .slots
                .iter()
                .map(|s| match &s.state {
                    QueryState::Failed(why) => format!("{}: {why}", s.hash),
                    other => format!("{}: {other:?}", s.hash),
                })
                .collect();
            Some(OpResult::Failed(format!(
                "object unavailable: {} of {} chunks recoverable, need {} ({})",
                decoded.len(),
                job.slots.len(),
                params.k_outer,
                status.join("; ")
            )))
        } else {
            None
        };
        if let Some(r) = result {
            self.queries.remove(&op);
            self.completed.push((op, r));
        }
    }

    // ---- fragment fetching, shared by query and repair ----

    fn fetch_state(&mut self, fetch: Fetch) -> Option<(&mut VecDeque<(NodeId, u8)>, &mut Vec<Fragment>, &mut usize, Digest256)> {
        match fetch {
            Fetch::Query { op, slot } => {
                let s = self.queries.get_mut(&op)?.slots.get_mut(slot)?;
                if s.state != QueryState::Fetching {
                    return None;
                }
                Some((&mut s.holders, &mut s.frags, &mut s.inflight, s.hash))
            }
            Fetch::Join { chunk } => {
                let j = self.joins.get_mut(&chunk)?;
                if !matches!(j.phase, JoinPhase::Fetch) {
                    return None;
                }
                Some((&mut j.holders, &mut j.frags, &mut j.inflight, chunk))
            }
        }
    }

    fn pump_fetch(&mut self, now: Millis, fetch: Fetch) {
        let k = self.cfg.codec.k_inner;
        let mut sends = Vec::new();
        let exhausted;
        {
            let Some((holders, frags, inflight, hash)) = self.fetch_state(fetch) else { return };
            while frags.len() + *inflight < k {
                let Some((peer, attempt)) = holders.pop_front() else { break };
                *inflight += 1;
                sends.push((peer, attempt, hash));
            }
            exhausted = sends.is_empty() && *inflight == 0 && frags.len() < k;
        }
        for (peer, attempt, hash) in sends {
            self.request(now, peer, Pending::Get { fetch, peer, attempt }, |req| {
                Message::GetFragment(GetFragment { req, chunk_hash: hash })
            });
        }
        if exhausted {
            self.fetch_failed(now, fetch, "not enough fragments");
        }
    }

    fn on_fragment_data(&mut self, now: Millis, from: NodeId, m: FragmentData) {
        let Some(Pending::Get { fetch, peer, .. }) = self.pending.remove(&m.req) else {
            return;
        };
        let frag = m.fragment.filter(|f| peer == from && f.chunk_hash == m.chunk_hash);
        self.fetch_result(now, fetch, frag);
    }

    fn fetch_result(&mut self, now: Millis, fetch: Fetch, frag: Option<Fragment>) {
        let k = self.cfg.codec.k_inner;
        let got = frag.is_some();
        let decode = {
            let Some((_, frags, inflight, hash)) = self.fetch_state(fetch) else { return };
            *inflight -= 1;
            if let Some(f) = frag {
                if f.chunk_hash == hash && frags.iter().all(|g| g.stream_index != f.stream_index) {
                    frags.push(f);
                }
            }
            frags.len() >= k
        };
        if got && matches!(fetch, Fetch::Join { .. }) {
            self.stats.repair_fragments_fetched += 1;
        }
        if !decode {
            self.pump_fetch(now, fetch);
            return;
        }
        let Some((holders, frags, _, _)) = self.fetch_state(fetch) else { return };
        match inner_decode(frags, k) {
            Ok(chunk) => self.fetch_done(now, fetch, chunk),
            Err(_) if !holders.is_empty() => {
                // Drop the oldest fragment and try a fresh one; a rank
                // deficiency or a corrupt symbol both clear up this way.
                frags.remove(0);
                self.pump_fetch(now, fetch);
            }
            Err(e) => {
                let why = format!("decode failed: {e}");
                self.fetch_failed(now, fetch, &why);
            }
        }
    }

    fn fetch_done(&mut self, now: Millis, fetch: Fetch, chunk: Vec<u8>) {
        match fetch {
            Fetch::Query { op, slot } => {
                if let Some(s) = self.queries.get_mut(&op).and_then(|j| j.slots.get_mut(slot)) {
                    s.state = QueryState::Decoded;
                    s.data = chunk;
                }
                self.check_query(now, op);
            }
            Fetch::Join { chunk: hash } => {
                let Some(j) = self.joins.get(&hash) else { return };
                let fragment = inner_encode(&chunk, hash, j.index, self.cfg.codec.k_inner);
                self.cache.insert(
                    hash,
                    Cached {
                        data: chunk,
                        expires: now + self.cfg.cache_ttl_ms,
                    },
                );
                self.complete_join(now, hash, fragment);
            }
        }
    }

    fn fetch_failed(&mut self, now: Millis, fetch: Fetch, why: &str) {
        match fetch {
            Fetch::Query { op, slot } => {
                let rounds = self.cfg.locate_rounds;
                if let Some(s) = self.queries.get_mut(&op).and_then(|j| j.slots.get_mut(slot)) {
                    s.rounds += 1;
                    if s.rounds < rounds {
                        // A lost proof response can hide a holder; look again.
                        s.state = QueryState::Locating;
                        let hash = s.hash;
                        self.start_locate(now, hash, LocatePurpose::Query { op, slot });
                        return;
                    }
                    s.state = QueryState::Failed(why.to_string());
                }
                self.check_query(now, op);
            }
            Fetch::Join { chunk } => {
                // Abandon; a later repair request restarts the join.
                self.joins.remove(&chunk);
            }
        }
    }

    // ---- repair ----

    fn start_repair(&mut self, now: Millis, chunk: Digest256) {
        if !self.store.contains_key(&chunk) {
            return;
        }
        if self.alive_count(&chunk, now) >= self.cfg.codec.r_group {
            self.repair_block.remove(&chunk);
            return;
        }
        self.start_locate(now, chunk, LocatePurpose::Repair);
    }

    fn repair_located(&mut self, now: Millis, chunk: Digest256, found: Vec<Found>) {
        let Some(stored) = self.store.get(&chunk) else { return };
        let (chunk_len, expiration) = (stored.fragment.chunk_len, stored.expiration);
        self.absorb_holders(now, &chunk, &found);
        let lt = self.cfg.liveness_timeout_ms;
        let view = &self.views[&chunk];
        let alive = view.alive_count(now, lt);
        let r = self.cfg.codec.r_group;
        if alive >= r {
            self.repair_block.remove(&chunk);
            return;
        }
        let deficit = r - alive;
        let targets: Vec<NodeId> = found
            .iter()
            .filter(|f| f.stored_index.is_none() && !view.members.contains_key(&f.peer))
            .map(|f| f.peer)
            .take(deficit)
            .collect();
        if targets.is_empty() {
            // Nothing new to ask; retry at a later heartbeat.
            self.repair_block.remove(&chunk);
            return;
        }
        let records = view.records();
        for t in targets {
            self.stats.repair_requests_sent += 1;
            self.send(
                t,
                Message::RepairRequest(RepairRequest {
                    chunk_hash: chunk,
                    chunk_len,
                    expiration,
                    view: records.clone(),
                }),
            );
        }
    }

    /// Adds located holders of `chunk` to the local view.
    fn absorb_holders(&mut self, now: Millis, chunk: &Digest256, found: &[Found]) {
        let Some(view) = self.views.get_mut(chunk) else { return };
        for f in found {
            if let Some(idx) = f.stored_index {
                if !view.members.contains_key(&f.peer) {
                    view.upsert(idx, f.proof.clone(), now);
                } else if let Some(m) = view.members.get_mut(&f.peer) {
                    m.last_claim = m.last_claim.max(now);
                }
            }
        }
    }

    fn sync_located(&mut self, now: Millis, chunk: Digest256, found: Vec<Found>) {
        if !self.store.contains_key(&chunk) {
            return;
        }
        self.absorb_holders(now, &chunk, &found);
        if self.alive_count(&chunk, now) >= self.cfg.codec.k_inner {
            self.bootstrapped.insert(chunk);
        }
    }

    fn on_repair_request(&mut self, now: Millis, from: NodeId, m: RepairRequest) {
        let chunk = m.chunk_hash;
        if self.store.contains_key(&chunk) {
            // Already a member: answer with a claim so the sender learns it.
            if let Some(c) = self.claim_for(now, &chunk) {
                self.stats.claims_sent += 1;
                self.send(from, Message::PersistenceClaim(c));
            }
            self.merge_records(now, &chunk, &m.view);
            return;
        }
        if self.evicted.contains_key(&chunk) {
            return;
        }
        if self.joins.contains_key(&chunk) {
            for r in &m.view {
                if r.node_id() != self.id && self.check_proof(&chunk, &r.proof) {
                    if let Some(j) = self.joins.get_mut(&chunk) {
                        j.view.upsert(r.fragment_index, r.proof.clone(), now);
                    }
                }
            }
            return;
        }
        let Some(proof) = self.own_proof(&chunk) else { return };
        let mut view = GroupView::new(chunk);
        for r in &m.view {
            if r.node_id() != self.id && self.check_proof(&chunk, &r.proof) {
                view.upsert(r.fragment_index, r.proof.clone(), now);
            }
        }
        if view.members.is_empty() {
            return;
        }
        let index = loop {
            let i = self.rng.gen_range(OUTER_INDEX_BASE..=u64::MAX);
            if !view.has_index(i) {
                break i;
            }
        };
        let members: Vec<NodeId> = view.members.keys().copied().collect();
        self.joins.insert(
            chunk,
            Join {
                chunk_len: m.chunk_len,
                expiration: m.expiration,
                index,
                proof,
                view,
                phase: JoinPhase::Cache { waiting: members.len() },
                holders: VecDeque::new(),
                frags: Vec::new(),
                inflight: 0,
            },
        );
        for peer in members {
            self.request(now, peer, Pending::Cache { chunk }, |req| {
                Message::ChunkCacheRequest(ChunkCacheRequest {
                    req,
                    chunk_hash: chunk,
                    stream_index: index,
                })
            });
        }
    }

    fn on_cache_response(&mut self, now: Millis, from: NodeId, m: ChunkCacheResponse) {
        let _ = from;
        let Some(Pending::Cache { chunk }) = self.pending.remove(&m.req) else {
            return;
        };
        let hit = match (&m.fragment, self.joins.get(&chunk)) {
            (Some(f), Some(j)) => f.chunk_hash == chunk && f.stream_index == j.index && f.chunk_len == j.chunk_len,
            _ => false,
        };
        if hit {
            self.stats.repair_cache_hits += 1;
            self.complete_join(now, chunk, m.fragment.unwrap());
        } else {
            self.cache_miss(now, chunk);
        }
    }

    fn cache_miss(&mut self, now: Millis, chunk: Digest256) {
        let Some(j) = self.joins.get_mut(&chunk) else { return };
        let JoinPhase::Cache { waiting } = &mut j.phase else { return };
        *waiting -= 1;
        if *waiting > 0 {
            return;
        }
        let mut holders: Vec<NodeId> = j.view.members.keys().copied().collect();
        holders.shuffle(&mut self.rng);
        let j = self.joins.get_mut(&chunk).unwrap();
        j.holders = holders.into_iter().map(|h| (h, 0)).collect();
        j.phase = JoinPhase::Fetch;
        self.pump_fetch(now, Fetch::Join { chunk });
    }

    fn complete_join(&mut self, now: Millis, chunk: Digest256, fragment: Fragment) {
        let Some(j) = self.joins.remove(&chunk) else { return };
        let mut view = j.view;
        // Records came from a live member's view one join round ago.
        for m in view.members.values_mut() {
            m.last_claim = now;
        }
        view.upsert(fragment.stream_index, j.proof.clone(), now);
        self.store.insert(
            chunk,
            Stored {
                fragment,
                proof: j.proof,
                received_at: now,
                expiration: j.expiration,
            },
        );
        self.stats.fragments_stored += 1;
        self.stats.joins_completed += 1;
        let members: Vec<NodeId> = view.members.keys().filter(|id| **id != self.id).copied().collect();
        self.views.insert(chunk, view);
        self.bootstrapped.insert(chunk);
        if let Some(c) = self.claim_for(now, &chunk) {
            for p in members {
                self.stats.claims_sent += 1;
                self.send(p, Message::PersistenceClaim(c.clone()));
            }
        }
    }

    // ---- eviction ----

    fn evict_located(&mut self, op: OpId, chunk: Digest256, found: Vec<Found>) {
        let oldest = found
            .iter()
            .filter_map(|f| Some((f.stored_at?, f.peer)))
            .min();
        match oldest {
            Some((_, peer)) => {
                self.send(peer, Message::EvictMember(EvictMember { chunk_hash: chunk }));
                self.completed.push((op, OpResult::Evicted(peer)));
            }
            None => self.completed.push((op, OpResult::Failed(format!("no holders of {chunk} found")))),
        }
    }
}

impl StoreSlot {
    fn new(ordinal: usize, chunk: Chunk) -> StoreSlot {
        StoreSlot {
            ordinal,
            hash: chunk.hash(),
            chunk,
            rounds: 0,
            state: StoreState::Locating,
            candidates: VecDeque::new(),
            tried: BTreeSet::new(),
            stored: BTreeMap::new(),
            inflight: 0,
            free_indices: Vec::new(),
            next_index: 0,
        }
    }
}
