//! Monte Carlo oracles. Each simulates explicit node sets rather than
//! reusing any closed form, so agreement with the analytical side is
//! evidence for both.
//!
//! Trials are split into fixed batches seeded from `(seed, batch)`, so
//! estimates do not depend on how many threads run them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use super::{AnalysisError, AttackParams, CtmcParams};

const BATCH: u64 = 4_096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: u64,
}

impl McEstimate {
    fn from_hits(hits: u64, trials: u64) -> McEstimate {
        let mean = hits as f64 / trials as f64;
        McEstimate {
            mean,
            stderr: (mean * (1.0 - mean) / trials as f64).sqrt(),
            trials,
        }
    }

    /// Whether the estimate is consistent with a true probability of `x`
    /// at `sigmas` standard errors. The error is that of a proportion at
    /// `x` itself (a score test), floored at one hit's worth of probability.
    pub fn agrees(&self, x: f64, sigmas: f64) -> bool {
        let n = self.trials as f64;
        let p = x.clamp(1.0 / n, 1.0 - 1.0 / n);
        (x - self.mean).abs() <= sigmas * (p * (1.0 - p) / n).sqrt()
    }
}

fn batches(trials: u64) -> impl ParallelIterator<Item = (u64, u64)> {
    let n = trials.div_ceil(BATCH);
    (0..n).into_par_iter().map(move |b| (b, BATCH.min(trials - b * BATCH)))
}

fn batch_rng(seed: u64, batch: u64) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&batch.to_le_bytes());
    ChaCha8Rng::from_seed(s)
}

/// A group as an explicit member list over node ids `0..N`; ids below `F`
/// are Byzantine.
struct Group {
    members: Vec<u64>,
    is_member: Vec<bool>,
}

impl Group {
    fn from_ids(total: u64, ids: impl IntoIterator<Item = u64>) -> Group {
        let mut g = Group {
            members: Vec::new(),
            is_member: vec![false; total as usize],
        };
        for id in ids {
            g.members.push(id);
            g.is_member[id as usize] = true;
        }
        g
    }

    fn honest(&self, f: u64) -> u64 {
        self.members.iter().filter(|&&m| m >= f).count() as u64
    }

    fn remove_at(&mut self, pos: usize) {
        let id = self.members.swap_remove(pos);
        self.is_member[id as usize] = false;
    }

    /// One step; returns false once fewer than `k` honest members remain.
    fn step(&mut self, p: &CtmcParams, rng: &mut ChaCha8Rng) -> bool {
        let f = p.byzantine;
        let honest = self.honest(f);
        let c = if p.lambda > 0.0 && honest > 0 {
            Poisson::new(p.lambda * honest as f64).unwrap().sample(rng) as u64
        } else {
            0
        };
        if honest < c + p.k {
            return false;
        }
        for _ in 0..c {
            let honest_pos: Vec<usize> = (0..self.members.len()).filter(|&i| self.members[i] >= f).collect();
            let pos = honest_pos[rng.gen_range(0..honest_pos.len())];
            self.remove_at(pos);
        }
        let e = p.evictions.min(self.members.len() as u64);
        for _ in 0..e {
            let pos = rng.gen_range(0..self.members.len());
            self.remove_at(pos);
        }
        if self.honest(f) < p.k {
            return false;
        }
        while (self.members.len() as u64) < p.n {
            let id = rng.gen_range(0..p.total);
            if !self.is_member[id as usize] {
                self.members.push(id);
                self.is_member[id as usize] = true;
            }
        }
        true
    }

    fn state(&self, p: &CtmcParams) -> usize {
        if self.honest(p.byzantine) < p.k {
            p.absorbing()
        } else {
            (p.n - self.honest(p.byzantine)) as usize
        }
    }
}

fn random_group(p: &CtmcParams, rng: &mut ChaCha8Rng) -> Group {
    let ids = sample(rng, p.total as usize, p.n as usize).into_iter().map(|i| i as u64);
    Group::from_ids(p.total, ids)
}

/// Fraction of uniformly drawn groups absorbed within `p.t` steps.
pub fn mc_absorption(p: &CtmcParams, trials: u64, seed: u64) -> Result<McEstimate, AnalysisError> {
    p.validate()?;
    let hits: u64 = batches(trials)
        .map(|(b, count)| {
            let mut rng = batch_rng(seed, b);
            let mut hits = 0;
            for _ in 0..count {
                let mut g = random_group(p, &mut rng);
                let mut absorbed = g.honest(p.byzantine) < p.k;
                for _ in 0..p.t {
                    if absorbed {
                        break;
                    }
                    absorbed = !g.step(p, &mut rng);
                }
                hits += absorbed as u64;
            }
            hits
        })
        .sum();
    Ok(McEstimate::from_hits(hits, trials))
}

/// Empirical distribution of the next state from a group with `b` Byzantine members.
pub fn mc_transition_row(p: &CtmcParams, b: u64, trials: u64, seed: u64) -> Result<Vec<McEstimate>, AnalysisError> {
    p.validate()?;
    if b > p.n - p.k || b > p.byzantine || p.n - b > p.total - p.byzantine {
        return Err(AnalysisError::Invalid(format!("state {b} is not a reachable transient state")));
    }
    let dim = p.states();
    let counts: Vec<u64> = batches(trials)
        .map(|(batch, count)| {
            let mut rng = batch_rng(seed, batch);
            let mut counts = vec![0u64; dim];
            for _ in 0..count {
                let byz = sample(&mut rng, p.byzantine as usize, b as usize).into_iter().map(|i| i as u64);
                let honest = sample(&mut rng, (p.total - p.byzantine) as usize, (p.n - b) as usize)
                    .into_iter()
                    .map(|i| i as u64 + p.byzantine);
                let mut g = Group::from_ids(p.total, byz.chain(honest));
                let next = if g.step(p, &mut rng) { g.state(p) } else { p.absorbing() };
                counts[next] += 1;
            }
            counts
        })
        .reduce(|| vec![0u64; dim], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect());
    Ok(counts.into_iter().map(|h| McEstimate::from_hits(h, trials)).collect())
}

/// Chance that some object loses more than R chunks when `phi_mu` distinct
/// chunks out of `Ω (K+R)` are destroyed uniformly at random.
pub fn mc_attack(a: &AttackParams, trials: u64, seed: u64) -> McEstimate {
    let kr = a.outer_k + a.outer_r;
    let total = (a.omega * kr) as usize;
    let hits: u64 = batches(trials)
        .map(|(b, count)| {
            let mut rng = batch_rng(seed, b);
            let mut hits = 0;
            let mut per_object = vec![0u64; a.omega as usize];
            for _ in 0..count {
                per_object.iter_mut().for_each(|x| *x = 0);
                let take = (a.phi_mu as usize).min(total);
                for chunk in sample(&mut rng, total, take) {
                    per_object[chunk / kr as usize] += 1;
                }
                hits += per_object.iter().any(|&x| x > a.outer_r) as u64;
            }
            hits
        })
        .sum();
    McEstimate::from_hits(hits, trials)
}
