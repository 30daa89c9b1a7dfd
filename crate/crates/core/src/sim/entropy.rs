use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::codec::Digest256;
use crate::crypto::KeyPair;
use crate::selection::{default_scale, distance, eligible, Threshold};

use super::{prg_output, EventQueue, Lottery, Metrics, SimConfig, SimError, TracePoint};

/// Nodes farther than `m + 64` units have acceptance probability below
/// 2^-64 and are never drawn.
const DISTANCE_CUTOFF: f64 = 64.0;

struct Node {
    uid: u64,
    pos: Digest256,
    key: u64,
    keys: Option<KeyPair>,
    byzantine: bool,
    /// Groups this node wins the lottery for; memberships are a subset.
    eligible: Vec<u32>,
    member_of: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
struct Cand {
    slot: u32,
    d: f64,
    member: bool,
    honest: bool,
}

struct Group {
    hash: Digest256,
    object: u32,
    /// Eligible nodes by increasing distance.
    cands: Vec<Cand>,
    members: usize,
    honest: usize,
    pending: usize,
    lost: bool,
    /// Honest member holding the decoded chunk, and when it drops it.
    cache: Option<(u32, f64)>,
}

struct Object {
    chunks: Vec<u32>,
    lost_chunks: usize,
    lost: bool,
}

enum Ev {
    Fail { slot: u32, uid: u64 },
    Repair { group: u32 },
}

/// What one processed event did to the alive-honest fragment total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEvent {
    pub at: f64,
    pub kind: StepKind,
    pub fragment_delta: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Failure { slot: u32 },
    Repair { group: u32 },
    Stale,
}

pub struct EntropySim {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    now: f64,
    queue: EventQueue<Ev>,
    nodes: Vec<Node>,
    groups: Vec<Group>,
    objects: Vec<Object>,
    /// Group hashes sorted by position, for new-node eligibility.
    chunk_ring: Vec<(Digest256, u32)>,
    next_uid: u64,
    lifetime: Option<Exp<f64>>,
    metrics: Metrics,
}

impl EntropySim {
    pub fn new(cfg: &SimConfig) -> Result<EntropySim, SimError> {
        cfg.validate()?;
        let lambda = cfg.churn_per_hour();
        let mut sim = EntropySim {
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: 0.0,
            queue: EventQueue::new(),
            nodes: Vec::with_capacity(cfg.nodes),
            groups: Vec::new(),
            objects: Vec::with_capacity(cfg.objects),
            chunk_ring: Vec::new(),
            next_uid: 0,
            lifetime: (lambda > 0.0).then(|| Exp::new(lambda).expect("positive rate")),
            metrics: Metrics::default(),
        };
        let byz = cfg.byzantine_count();
        for slot in 0..cfg.nodes {
            let node = sim.fresh_node(slot < byz);
            sim.nodes.push(node);
        }
        for slot in byz..cfg.nodes {
            sim.schedule_failure(slot as u32);
        }
        sim.place_objects();
        sim.metrics.storage_overhead = sim.storage_overhead();
        if let Some(g) = sim.groups.get(cfg.trace_group) {
            let p = TracePoint {
                hours: 0.0,
                alive_honest: g.honest,
            };
            sim.metrics.trace.push(p);
        }
        Ok(sim)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn alive_honest(&self, group: usize) -> usize {
        self.groups[group].honest
    }

    pub fn members(&self, group: usize) -> usize {
        self.groups[group].members
    }

    pub fn eligible_count(&self, group: usize) -> usize {
        self.groups[group].cands.len()
    }

    /// Alive-honest fragments summed over every group.
    pub fn honest_fragments(&self) -> usize {
        self.groups.iter().map(|g| g.honest).sum()
    }

    fn fresh_node(&mut self, byzantine: bool) -> Node {
        let uid = self.next_uid;
        self.next_uid += 1;
        let key: u64 = self.rng.gen();
        let (pos, keys) = match self.cfg.lottery {
            Lottery::Prg => (Digest256(self.rng.gen()), None),
            Lottery::Vrf => {
                let mut seed = [0u8; 32];
                seed[..8].copy_from_slice(&key.to_le_bytes());
                seed[8..16].copy_from_slice(&uid.to_le_bytes());
                seed[16..24].copy_from_slice(&self.cfg.seed.to_le_bytes());
                let kp = KeyPair::from_seed(seed);
                (kp.node_id(), Some(kp))
            }
        };
        Node {
            uid,
            pos,
            key,
            keys,
            byzantine,
            eligible: Vec::new(),
            member_of: Vec::new(),
        }
    }

    fn schedule_failure(&mut self, slot: u32) {
        if let Some(exp) = self.lifetime {
            let at = self.now + exp.sample(&mut self.rng);
            let uid = self.nodes[slot as usize].uid;
            self.queue.push(at, Ev::Fail { slot, uid });
        }
    }

    fn max_distance(&self) -> f64 {
        default_scale(self.cfg.codec.r_group) + DISTANCE_CUTOFF
    }

    fn wins(&self, node: &Node, hash: &Digest256, d: f64) -> bool {
        match eligible(d, default_scale(self.cfg.codec.r_group)).1 {
            Threshold::All => true,
            th => {
                let r = match &node.keys {
                    Some(kp) => kp.vrf_prove(hash.as_bytes()).r,
                    None => prg_output(node.key, u64::from_be_bytes(hash.0[..8].try_into().unwrap())),
                };
                th.accepts(&r)
            }
        }
    }

    /// Initial store: each object materializes chunk ordinals until
    /// `n_chunks` of them have at least `r_group` eligible nodes, trying at
    /// most `2 * n_chunks`. The nearest `r_group` eligible nodes store.
    fn place_objects(&mut self) {
        let mut ring: Vec<(Digest256, u32)> = self.nodes.iter().enumerate().map(|(i, n)| (n.pos, i as u32)).collect();
        ring.sort();
        let c = self.cfg.codec;
        for o in 0..self.cfg.objects {
            let mut chunks = Vec::with_capacity(c.n_chunks);
            for _ in 0..2 * c.n_chunks {
                if chunks.len() == c.n_chunks {
                    break;
                }
                let hash = Digest256(self.rng.gen());
                let mut cands = Vec::new();
                near(&ring, &hash, self.cfg.nodes, self.max_distance(), |slot, d| {
                    let node = &self.nodes[slot as usize];
                    if self.wins(node, &hash, d) {
                        cands.push(Cand {
                            slot,
                            d,
                            member: false,
                            honest: !node.byzantine,
                        });
                    }
                });
                if cands.len() < c.r_group {
                    continue;
                }
                cands.sort_by(|a, b| a.d.total_cmp(&b.d).then(a.slot.cmp(&b.slot)));
                let g = self.groups.len() as u32;
                let mut honest = 0;
                for cand in cands.iter_mut() {
                    self.nodes[cand.slot as usize].eligible.push(g);
                }
                for cand in cands.iter_mut().take(c.r_group) {
                    cand.member = true;
                    honest += cand.honest as usize;
                    self.nodes[cand.slot as usize].member_of.push(g);
                }
                self.groups.push(Group {
                    hash,
                    object: o as u32,
                    cands,
                    members: c.r_group,
                    honest,
                    pending: 0,
                    lost: false,
                    cache: None,
                });
                chunks.push(g);
            }
            self.objects.push(Object {
                chunks,
                lost_chunks: 0,
                lost: false,
            });
            if self.objects[o].chunks.len() < c.k_outer {
                self.objects[o].lost = true;
                self.metrics.lost_objects += 1;
            }
        }
        for g in 0..self.groups.len() {
            if self.groups[g].honest < c.k_inner {
                self.lose_group(g as u32);
            }
        }
        self.chunk_ring = self.groups.iter().enumerate().map(|(i, g)| (g.hash, i as u32)).collect();
        self.chunk_ring.sort();
    }

    fn storage_overhead(&self) -> f64 {
        if self.objects.is_empty() {
            return 0.0;
        }
        let stored: usize = self.groups.iter().map(|g| g.members).sum();
        stored as f64 / (self.objects.len() as f64 * self.cfg.fragments_per_object())
    }

    fn lose_group(&mut self, g: u32) {
        let grp = &mut self.groups[g as usize];
        if grp.lost {
            return;
        }
        grp.lost = true;
        self.metrics.lost_chunks += 1;
        let obj = &mut self.objects[grp.object as usize];
        obj.lost_chunks += 1;
        if !obj.lost && obj.chunks.len() - obj.lost_chunks < self.cfg.codec.k_outer {
            obj.lost = true;
            self.metrics.lost_objects += 1;
        }
    }

    fn trace(&mut self, g: u32) {
        if g as usize == self.cfg.trace_group {
            let p = TracePoint {
                hours: self.now,
                alive_honest: self.groups[g as usize].honest,
            };
            self.metrics.trace.push(p);
        }
    }

    /// Remaining members notice after the liveness timeout (plus heartbeat
    /// phase), wait out the repair jitter, then transfer and decode.
    fn detection_delay(&mut self) -> f64 {
        let c = &self.cfg;
        let (hb, jit) = (c.heartbeat_hours, c.repair_jitter_hours);
        c.liveness_hours + self.rng.gen::<f64>() * hb + self.rng.gen::<f64>() * jit + c.repair_latency_hours
    }

    /// Removes a node, replaces it with a fresh honest one, and returns the
    /// change in alive-honest fragments.
    pub(super) fn fail(&mut self, slot: u32) -> i64 {
        self.metrics.node_failures += 1;
        let k = self.cfg.codec.k_inner;
        let node = &mut self.nodes[slot as usize];
        let eligible = std::mem::take(&mut node.eligible);
        node.member_of.clear();
        let mut delta = 0;
        for g in eligible {
            let grp = &mut self.groups[g as usize];
            let i = grp
                .cands
                .iter()
                .position(|c| c.slot == slot)
                .expect("eligibility is recorded on both sides");
            let c = grp.cands.remove(i);
            if grp.cache.is_some_and(|(h, _)| h == slot) {
                grp.cache = None;
            }
            if !c.member {
                continue;
            }
            grp.members -= 1;
            if c.honest {
                grp.honest -= 1;
                delta -= 1;
            }
            let (lost, honest) = (grp.lost, grp.honest);
            self.trace(g);
            if lost {
                continue;
            }
            if honest < k {
                self.lose_group(g);
            } else {
                self.groups[g as usize].pending += 1;
                let at = self.now + self.detection_delay();
                self.queue.push(at, Ev::Repair { group: g });
            }
        }
        let fresh = self.fresh_node(false);
        self.nodes[slot as usize] = fresh;
        self.schedule_failure(slot);
        self.join(slot);
        delta
    }

    /// Registers a new node's eligibility. Short groups pick it up at their
    /// next membership sync.
    fn join(&mut self, slot: u32) {
        let node = &self.nodes[slot as usize];
        let mut won = Vec::new();
        near(&self.chunk_ring, &node.pos, self.cfg.nodes, self.max_distance(), |g, d| {
            if self.wins(node, &self.groups[g as usize].hash, d) {
                won.push((g, d));
            }
        });
        let honest = !node.byzantine;
        let r = self.cfg.codec.r_group;
        for (g, d) in won {
            self.nodes[slot as usize].eligible.push(g);
            let grp = &mut self.groups[g as usize];
            let at = grp.cands.partition_point(|c| c.d < d);
            grp.cands.insert(
                at,
                Cand {
                    slot,
                    d,
                    member: false,
                    honest,
                },
            );
            if !grp.lost && grp.members + grp.pending < r {
                grp.pending += 1;
                let delay = self.rng.gen::<f64>() * self.cfg.heartbeat_hours + self.cfg.repair_latency_hours;
                self.queue.push(self.now + delay, Ev::Repair { group: g });
            }
        }
    }

    /// Recruits the nearest eligible non-member if the group is still short.
    fn repair(&mut self, g: u32) -> i64 {
        let (k, r) = (self.cfg.codec.k_inner, self.cfg.codec.r_group);
        let ttl = self.cfg.cache_ttl_hours;
        let now = self.now;
        let grp = &mut self.groups[g as usize];
        grp.pending -= 1;
        if grp.lost || grp.members >= r {
            return 0;
        }
        let Some(i) = grp.cands.iter().position(|c| !c.member) else {
            return 0;
        };
        let cand = &mut grp.cands[i];
        cand.member = true;
        let (slot, honest) = (cand.slot, cand.honest);
        grp.members += 1;
        self.metrics.repairs += 1;
        self.nodes[slot as usize].member_of.push(g);
        if !honest {
            // Joins and claims, but downloads and stores nothing.
            return 0;
        }
        if grp.cache.is_some_and(|(_, until)| until > now) {
            self.metrics.cache_hits += 1;
            self.metrics.fragments_transferred += 1;
        } else {
            self.metrics.fragments_transferred += k as u64;
            grp.cache = (ttl > 0.0).then_some((slot, now + ttl));
        }
        grp.honest += 1;
        self.trace(g);
        1
    }

    /// Processes the next event within the horizon.
    pub fn step(&mut self) -> Option<StepEvent> {
        let at = self.queue.peek_time()?;
        if at > self.cfg.horizon_hours() {
            return None;
        }
        let (at, ev) = self.queue.pop()?;
        self.now = at;
        let (kind, fragment_delta) = match ev {
            Ev::Fail { slot, uid } if self.nodes[slot as usize].uid == uid => {
                (StepKind::Failure { slot }, self.fail(slot))
            }
            Ev::Fail { .. } => (StepKind::Stale, 0),
            Ev::Repair { group } => (StepKind::Repair { group }, self.repair(group)),
        };
        Some(StepEvent {
            at,
            kind,
            fragment_delta,
        })
    }

    pub fn run(&mut self) {
        while self.step().is_some() {}
    }

    pub fn finish(self) -> Metrics {
        let overhead = self.storage_overhead();
        let objects = self.objects.len();
        let mut m = self.metrics;
        m.repair_traffic = m.fragments_transferred as f64 / self.cfg.fragments_per_object();
        m.lost_fraction = if objects == 0 { 0.0 } else { m.lost_objects as f64 / objects as f64 };
        m.final_storage_overhead = overhead;
        m
    }

    /// Recounts every derived field from scratch; describes the first mismatch.
    pub fn audit(&self) -> Result<(), String> {
        for (gi, g) in self.groups.iter().enumerate() {
            let members = g.cands.iter().filter(|c| c.member).count();
            let honest = g.cands.iter().filter(|c| c.member && c.honest).count();
            if members != g.members || honest != g.honest {
                return Err(format!("group {gi}: counts {}/{} vs {members}/{honest}", g.members, g.honest));
            }
            if g.cands.windows(2).any(|w| w[0].d > w[1].d) {
                return Err(format!("group {gi}: candidates out of order"));
            }
            for c in &g.cands {
                let n = &self.nodes[c.slot as usize];
                if !n.eligible.contains(&(gi as u32)) || n.byzantine == c.honest {
                    return Err(format!("group {gi}: stale candidate {}", c.slot));
                }
                if c.member != n.member_of.contains(&(gi as u32)) {
                    return Err(format!("group {gi}: membership of {} disagrees", c.slot));
                }
            }
            if let Some((h, _)) = g.cache {
                if !g.cands.iter().any(|c| c.slot == h && c.member && c.honest) {
                    return Err(format!("group {gi}: cache holder {h} is not an honest member"));
                }
            }
        }
        for (si, n) in self.nodes.iter().enumerate() {
            for &g in &n.eligible {
                if !self.groups[g as usize].cands.iter().any(|c| c.slot == si as u32) {
                    return Err(format!("node {si}: missing from group {g}"));
                }
            }
        }
        Ok(())
    }

    // ---- attacker view ----

    /// Slot of the honest member an omniscient greedy attacker disables next:
    /// from the live group with the fewest honest members, the one that sits
    /// in the most other live groups.
    pub(super) fn greedy_victim(&self) -> Option<u32> {
        let (gi, _) = self
            .groups
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.lost && g.honest > 0)
            .min_by_key(|(i, g)| (g.honest, *i))?;
        self.groups[gi]
            .cands
            .iter()
            .filter(|c| c.member && c.honest)
            .map(|c| {
                let live = self.nodes[c.slot as usize]
                    .member_of
                    .iter()
                    .filter(|&&g| !self.groups[g as usize].lost)
                    .count();
                (live, c.slot)
            })
            .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
            .map(|(_, slot)| slot)
    }

    pub(super) fn random_honest(&mut self) -> Option<u32> {
        let honest: Vec<u32> = (0..self.nodes.len() as u32)
            .filter(|&s| !self.nodes[s as usize].byzantine)
            .collect();
        (!honest.is_empty()).then(|| honest[self.rng.gen_range(0..honest.len())])
    }
}

/// Visits ring entries around `target`, nearest first on each side, while
/// their distance stays within `max_d`. Each entry is visited at most once.
fn near(ring: &[(Digest256, u32)], target: &Digest256, total: usize, max_d: f64, mut f: impl FnMut(u32, f64)) {
    let len = ring.len();
    if len == 0 {
        return;
    }
    let start = ring.partition_point(|e| e.0 < *target);
    let mut seen = 0;
    for j in 0..len {
        let (pos, id) = ring[(start + j) % len];
        let d: f64 = distance(&pos, target, total);
        if d > max_d {
            break;
        }
        f(id, d);
        seen += 1;
    }
    for j in 1..=len - seen {
        let (pos, id) = ring[(start + len - j) % len];
        let d: f64 = distance(&pos, target, total);
        if d > max_d {
            break;
        }
        f(id, d);
    }
}

pub fn run_entropy(cfg: &SimConfig) -> Result<Metrics, SimError> {
    let mut sim = EntropySim::new(cfg)?;
    sim.run();
    Ok(sim.finish())
}

/// Alive-honest fragment counts of one group over `years`.
pub fn trace_fragments(cfg: &SimConfig, group: usize, years: f64) -> Result<Vec<TracePoint>, SimError> {
    let mut c = cfg.clone();
    c.trace_group = group;
    c.years = years;
    Ok(run_entropy(&c)?.trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_visits_each_entry_once() {
        let ring: Vec<(Digest256, u32)> = (0..10u8)
            .map(|i| {
                let mut b = [0u8; 32];
                b[0] = i * 25;
                (Digest256(b), i as u32)
            })
            .collect();
        let mut seen = Vec::new();
        near(&ring, &ring[3].0, 10, f64::INFINITY, |id, _| seen.push(id));
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut close = Vec::new();
        near(&ring, &ring[3].0, 10, 1.5, |id, _| close.push(id));
        assert_eq!(close, vec![3]);
    }
}
