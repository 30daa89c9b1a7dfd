use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attack::{run_targeted, AttackStrategy, AttackerConfig};
use super::{run_baseline, run_entropy, Metrics, SimConfig, SimError};

/// Bumped whenever a CSV column is added, removed or changes meaning.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Entropy,
    Baseline,
}

impl System {
    pub fn name(&self) -> &'static str {
        match self {
            System::Entropy => "entropy",
            System::Baseline => "baseline",
        }
    }
}

/// The configuration knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepVar {
    Objects,
    /// Failures per node-year.
    Churn,
    CacheTtl,
    Byzantine,
    /// Fraction of nodes disabled by the attacker.
    Attacked,
}

impl SweepVar {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVar::Objects => "objects",
            SweepVar::Churn => "churn",
            SweepVar::CacheTtl => "cache_ttl_hours",
            SweepVar::Byzantine => "byzantine_fraction",
            SweepVar::Attacked => "attacked_fraction",
        }
    }

    fn apply(&self, cfg: &mut SimConfig, v: f64) {
        match self {
            SweepVar::Objects => cfg.objects = v.round() as usize,
            SweepVar::Churn => cfg.churn_per_year = v,
            SweepVar::CacheTtl => cfg.cache_ttl_hours = v,
            SweepVar::Byzantine => cfg.byzantine_fraction = v,
            SweepVar::Attacked => {}
        }
    }
}

/// One CSV row per (system, sweep point, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub system: System,
    pub sweep_var: String,
    pub sweep_value: f64,
    pub seed: u64,
    pub repair_traffic_objects: f64,
    pub lost_objects: usize,
    pub lost_fraction: f64,
    pub repairs: u64,
    pub cache_hits: u64,
    pub storage_overhead: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub config: String,
    pub seed: u64,
    pub hours: f64,
    pub alive_honest: usize,
}

pub fn run_point(
    base: &SimConfig,
    system: System,
    var: SweepVar,
    value: f64,
    seed: u64,
    strategy: AttackStrategy,
) -> Result<Metrics, SimError> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    var.apply(&mut cfg, value);
    match (var, system) {
        (SweepVar::Attacked, _) => {
            let attacker = AttackerConfig::for_fraction(value, cfg.nodes, strategy);
            run_targeted(&cfg, system, &attacker)
        }
        (_, System::Entropy) => run_entropy(&cfg),
        (_, System::Baseline) => run_baseline(&cfg),
    }
}

/// Runs every (value, seed) pair in parallel; rows come back in input order.
pub fn sweep(
    base: &SimConfig,
    system: System,
    var: SweepVar,
    values: &[f64],
    seeds: &[u64],
    strategy: AttackStrategy,
) -> Result<Vec<SweepRow>, SimError> {
    let points: Vec<(f64, u64)> = values.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    points
        .par_iter()
        .map(|&(v, seed)| {
            let m = run_point(base, system, var, v, seed, strategy)?;
            Ok(SweepRow {
                system,
                sweep_var: var.name().to_string(),
                sweep_value: v,
                seed,
                repair_traffic_objects: m.repair_traffic,
                lost_objects: m.lost_objects,
                lost_fraction: m.lost_fraction,
                repairs: m.repairs,
                cache_hits: m.cache_hits,
                storage_overhead: m.storage_overhead,
            })
        })
        .collect()
}

pub fn run_byzantine_sweep(
    base: &SimConfig,
    system: System,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, SimError> {
    sweep(base, system, SweepVar::Byzantine, fractions, seeds, AttackStrategy::default())
}

/// Mean of a column per sweep value, in first-seen order.
pub fn mean_by_value(rows: &[SweepRow], column: impl Fn(&SweepRow) -> f64) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|e| e.0 == r.sweep_value) {
            Some(e) => {
                e.1 += column(r);
                e.2 += 1;
            }
            None => out.push((r.sweep_value, column(r), 1)),
        }
    }
    out.into_iter().map(|(v, s, n)| (v, s / n as f64)).collect()
}

/// Smallest sweep value whose mean lost fraction is positive.
pub fn loss_onset(rows: &[SweepRow]) -> Option<f64> {
    mean_by_value(rows, |r| r.lost_fraction)
        .into_iter()
        .filter(|&(_, loss)| loss > 0.0)
        .map(|(v, _)| v)
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        1.0
    };
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_a_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x + 1.0).collect();
        let f = linear_fit(&xs, &ys);
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        let noisy = linear_fit(&xs, &[1.0, 3.0, 2.0, 4.0]);
        assert!((noisy.r2 - 0.64).abs() < 1e-12);
    }

    #[test]
    fn onset_is_first_lossy_value() {
        let row = |v: f64, loss: f64| SweepRow {
            system: System::Entropy,
            sweep_var: "byzantine_fraction".into(),
            sweep_value: v,
            seed: 0,
            repair_traffic_objects: 0.0,
            lost_objects: 0,
            lost_fraction: loss,
            repairs: 0,
            cache_hits: 0,
            storage_overhead: 0.0,
        };
        let rows = vec![row(0.1, 0.0), row(0.3, 0.0), row(0.3, 0.2), row(0.5, 1.0)];
        assert_eq!(loss_onset(&rows), Some(0.3));
        assert_eq!(loss_onset(&rows[..2]), None);
    }
}
