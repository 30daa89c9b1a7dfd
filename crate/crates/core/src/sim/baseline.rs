use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::{EventQueue, Metrics, SimConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Replica {
    Good,
    /// Held by an honest node but copied from a replica without data.
    Garbage,
    /// Claimed by a Byzantine node, which stores nothing.
    Byzantine,
    Missing,
}

struct Node {
    uid: u64,
    byzantine: bool,
    held: Vec<(u32, u8)>,
}

struct Object {
    replicas: Vec<(u32, Replica)>,
    lost: bool,
}

enum Ev {
    Fail { slot: u32, uid: u64 },
    Repair { object: u32, replica: u8 },
}

/// Replicated store: each object lives on `replicas` random nodes, and a
/// failed replica is re-copied from a random surviving one after the repair
/// latency. Copies are not verified, so a copy sourced from a Byzantine
/// holder carries no data.
pub struct BaselineSim {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    now: f64,
    queue: EventQueue<Ev>,
    nodes: Vec<Node>,
    objects: Vec<Object>,
    next_uid: u64,
    lifetime: Option<Exp<f64>>,
    metrics: Metrics,
}

impl BaselineSim {
    pub fn new(cfg: &SimConfig) -> Result<BaselineSim, SimError> {
        cfg.validate()?;
        let lambda = cfg.churn_per_hour();
        let mut sim = BaselineSim {
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            now: 0.0,
            queue: EventQueue::new(),
            nodes: Vec::with_capacity(cfg.nodes),
            objects: Vec::with_capacity(cfg.objects),
            next_uid: 0,
            lifetime: (lambda > 0.0).then(|| Exp::new(lambda).expect("positive rate")),
            metrics: Metrics::default(),
        };
        let byz = cfg.byzantine_count();
        for slot in 0..cfg.nodes {
            sim.nodes.push(Node {
                uid: slot as u64,
                byzantine: slot < byz,
                held: Vec::new(),
            });
        }
        sim.next_uid = cfg.nodes as u64;
        for slot in byz..cfg.nodes {
            sim.schedule_failure(slot as u32);
        }
        for o in 0..cfg.objects {
            let mut replicas: Vec<(u32, Replica)> = Vec::with_capacity(cfg.replicas);
            while replicas.len() < cfg.replicas {
                let slot = sim.rng.gen_range(0..cfg.nodes) as u32;
                if replicas.iter().any(|r| r.0 == slot) {
                    continue;
                }
                let state = if sim.nodes[slot as usize].byzantine {
                    Replica::Byzantine
                } else {
                    Replica::Good
                };
                sim.nodes[slot as usize].held.push((o as u32, replicas.len() as u8));
                replicas.push((slot, state));
            }
            let lost = !replicas.iter().any(|r| r.1 == Replica::Good);
            sim.metrics.lost_objects += lost as usize;
            sim.objects.push(Object { replicas, lost });
        }
        sim.metrics.storage_overhead = sim.storage_overhead();
        Ok(sim)
    }

    fn schedule_failure(&mut self, slot: u32) {
        if let Some(exp) = self.lifetime {
            let at = self.now + exp.sample(&mut self.rng);
            let uid = self.nodes[slot as usize].uid;
            self.queue.push(at, Ev::Fail { slot, uid });
        }
    }

    fn storage_overhead(&self) -> f64 {
        if self.objects.is_empty() {
            return 0.0;
        }
        let held: usize = self
            .objects
            .iter()
            .map(|o| o.replicas.iter().filter(|r| r.1 != Replica::Missing).count())
            .sum();
        held as f64 / self.objects.len() as f64
    }

    pub(super) fn fail(&mut self, slot: u32) {
        self.metrics.node_failures += 1;
        let held = std::mem::take(&mut self.nodes[slot as usize].held);
        for (o, i) in held {
            let obj = &mut self.objects[o as usize];
            obj.replicas[i as usize].1 = Replica::Missing;
            if obj.lost {
                continue;
            }
            if !obj.replicas.iter().any(|r| r.1 == Replica::Good) {
                obj.lost = true;
                self.metrics.lost_objects += 1;
            } else {
                let at = self.now + self.cfg.repair_latency_hours;
                self.queue.push(at, Ev::Repair { object: o, replica: i });
            }
        }
        self.nodes[slot as usize] = Node {
            uid: self.next_uid,
            byzantine: false,
            held: Vec::new(),
        };
        self.next_uid += 1;
        self.schedule_failure(slot);
    }

    fn repair(&mut self, o: u32, i: u8) {
        if self.objects[o as usize].lost {
            return;
        }
        let n = self.nodes.len();
        let target = loop {
            let slot = self.rng.gen_range(0..n) as u32;
            let reps = &self.objects[o as usize].replicas;
            if !reps.iter().any(|r| r.0 == slot && r.1 != Replica::Missing) {
                break slot;
            }
        };
        let sources: Vec<Replica> = self.objects[o as usize]
            .replicas
            .iter()
            .map(|r| r.1)
            .filter(|s| *s != Replica::Missing)
            .collect();
        let source = sources[self.rng.gen_range(0..sources.len())];
        self.metrics.repairs += 1;
        let state = if self.nodes[target as usize].byzantine {
            Replica::Byzantine
        } else {
            self.metrics.fragments_transferred += 1;
            if source == Replica::Good {
                Replica::Good
            } else {
                Replica::Garbage
            }
        };
        self.objects[o as usize].replicas[i as usize] = (target, state);
        self.nodes[target as usize].held.push((o, i));
    }

    /// Processes the next event within the horizon; false when done.
    pub fn step(&mut self) -> bool {
        match self.queue.peek_time() {
            Some(at) if at <= self.cfg.horizon_hours() => {}
            _ => return false,
        }
        let (at, ev) = self.queue.pop().expect("peeked");
        self.now = at;
        match ev {
            Ev::Fail { slot, uid } if self.nodes[slot as usize].uid == uid => self.fail(slot),
            Ev::Fail { .. } => {}
            Ev::Repair { object, replica } => self.repair(object, replica),
        }
        true
    }

    pub fn run(&mut self) {
        while self.step() {}
    }

    pub fn good_replicas(&self, object: usize) -> usize {
        self.objects[object].replicas.iter().filter(|r| r.1 == Replica::Good).count()
    }

    pub fn finish(self) -> Metrics {
        let overhead = self.storage_overhead();
        let objects = self.objects.len();
        let mut m = self.metrics;
        // One repair copies one whole object.
        m.repair_traffic = m.fragments_transferred as f64;
        m.lost_fraction = if objects == 0 { 0.0 } else { m.lost_objects as f64 / objects as f64 };
        m.final_storage_overhead = overhead;
        m
    }

    // ---- attacker view ----

    /// From the live object with the fewest good replicas, the holder of a
    /// good replica that holds the most good replicas of live objects.
    pub(super) fn greedy_victim(&self) -> Option<u32> {
        let (oi, _) = self
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| !o.lost)
            .map(|(i, o)| (i, o.replicas.iter().filter(|r| r.1 == Replica::Good).count()))
            .min_by_key(|&(i, good)| (good, i))?;
        self.objects[oi]
            .replicas
            .iter()
            .filter(|r| r.1 == Replica::Good)
            .map(|r| {
                let weight = self.nodes[r.0 as usize]
                    .held
                    .iter()
                    .filter(|(o, i)| {
                        let obj = &self.objects[*o as usize];
                        !obj.lost && obj.replicas[*i as usize].1 == Replica::Good
                    })
                    .count();
                (weight, r.0)
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

pub fn run_baseline(cfg: &SimConfig) -> Result<Metrics, SimError> {
    let mut sim = BaselineSim::new(cfg)?;
    sim.run();
    Ok(sim.finish())
}
