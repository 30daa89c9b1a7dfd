use serde::{Deserialize, Serialize};

use super::report::System;
use super::{BaselineSim, EntropySim, Metrics, SimConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackStrategy {
    /// Sees every placement and drives the weakest group (or object) below
    /// recoverability first. Chunk-to-object links stay hidden from it, since
    /// outer indices come from the owner's secret.
    #[default]
    OmniscientGreedy,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackerConfig {
    /// Nodes disabled, at most N.
    pub budget: usize,
    pub strategy: AttackStrategy,
    /// Fragments each node may hold per group; carried for the analytical
    /// bound, the simulator places at most one per group already.
    pub mu: usize,
}

impl AttackerConfig {
    pub fn for_fraction(fraction: f64, nodes: usize, strategy: AttackStrategy) -> AttackerConfig {
        AttackerConfig {
            budget: ((fraction * nodes as f64).round() as usize).min(nodes),
            strategy,
            mu: 1,
        }
    }
}

/// Disables up to `budget` honest nodes right after the initial store, then
/// runs the remaining horizon with normal churn and repair. Disabled nodes
/// are replaced by fresh honest ones like churned nodes.
pub fn run_targeted(cfg: &SimConfig, system: System, attacker: &AttackerConfig) -> Result<Metrics, SimError> {
    if attacker.budget > cfg.nodes {
        return Err(SimError::InvalidConfig("attacker budget exceeds node count".into()));
    }
    match system {
        System::Entropy => {
            let mut sim = EntropySim::new(cfg)?;
            for _ in 0..attacker.budget {
                let victim = match attacker.strategy {
                    AttackStrategy::OmniscientGreedy => sim.greedy_victim(),
                    AttackStrategy::Random => sim.random_honest(),
                };
                let Some(v) = victim else { break };
                sim.fail(v);
            }
            sim.run();
            Ok(sim.finish())
        }
        System::Baseline => {
            let mut sim = BaselineSim::new(cfg)?;
            for _ in 0..attacker.budget {
                let victim = match attacker.strategy {
                    AttackStrategy::OmniscientGreedy => sim.greedy_victim(),
                    AttackStrategy::Random => sim.random_honest(),
                };
                let Some(v) = victim else { break };
                sim.fail(v);
            }
            sim.run();
            Ok(sim.finish())
        }
    }
}
