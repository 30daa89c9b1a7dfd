use std::path::PathBuf;

use clap::{Args, Subcommand};
use entropy_core::sim::{
    sweep, trace_fragments, AttackStrategy, Lottery, SimConfig, SweepRow, SweepVar, System, TraceRow,
};
use serde_json::{json, Value};

use crate::config::{parse_list, parse_outer, resolve};
use crate::error::{usage, CliError, Result};
use crate::manifest::{write_outputs, RunManifest, SweepSpec};

pub const SWEEP_COLUMNS: [&str; 10] = [
    "system",
    "sweep_var",
    "sweep_value",
    "seed",
    "repair_traffic_objects",
    "lost_objects",
    "lost_fraction",
    "repairs",
    "cache_hits",
    "storage_overhead",
];

pub const TRACE_COLUMNS: [&str; 4] = ["config", "seed", "hours", "alive_honest"];

const CSV_HELP: &str = "\
Outputs <out>/<command>.csv and <out>/<command>.manifest.json.

Sweep CSV (schema 1): system, sweep_var, sweep_value, seed,
  repair_traffic_objects, lost_objects, lost_fraction, repairs,
  cache_hits, storage_overhead
Trace CSV (schema 1): config, seed, hours, alive_honest

Lists are `a,b,c` or an inclusive range `a..b` of --points values. A flag
given several values becomes the sweep; single values just set the config.
Precedence: flags, then --config JSON, then built-in defaults.
ENTROPY_SEED sets the default seed.";

#[derive(Debug, Subcommand)]
#[command(after_help = CSV_HELP)]
pub enum SimCommand {
    /// Repair traffic against object count, churn or cache lifetime.
    RepairTraffic(SimArgs),
    /// Alive-honest fragment count of one chunk group over time.
    Trace(TraceArgs),
    /// Object loss against the Byzantine fraction.
    Byzantine(SimArgs),
    /// Object loss against the fraction of nodes an attacker disables.
    Targeted(TargetedArgs),
    /// The 3-replica baseline alone.
    Baseline(SimArgs),
}

#[derive(Debug, Args)]
#[command(after_help = CSV_HELP)]
pub struct SimArgs {
    /// JSON file with SimConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Runs per sweep point, with seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Values produced by an `a..b` range.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub years: Option<f64>,
    #[arg(long)]
    pub objects: Option<String>,
    /// Failures per honest node-year.
    #[arg(long)]
    pub churn: Option<String>,
    /// Chunk cache lifetime in hours; 0 disables the cache.
    #[arg(long)]
    pub cache_ttl: Option<String>,
    #[arg(long)]
    pub byzantine: Option<String>,
    #[arg(long)]
    pub k_inner: Option<usize>,
    #[arg(long)]
    pub r_group: Option<String>,
    /// Outer code as n,k.
    #[arg(long)]
    pub outer: Option<String>,
    /// prg or vrf.
    #[arg(long)]
    pub lottery: Option<String>,
    /// entropy (default), baseline or both.
    #[arg(long)]
    pub system: Option<String>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Index of the traced chunk group.
    #[arg(long)]
    pub group: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TargetedArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Attacked node fractions.
    #[arg(long)]
    pub attacked: Option<String>,
    /// omniscient-greedy or random.
    #[arg(long)]
    pub strategy: Option<String>,
}

/// A list-valued flag and the config key it sets when single-valued.
struct ListFlag {
    name: &'static str,
    key: Option<&'static str>,
    var: Option<SweepVar>,
    values: Vec<f64>,
}

fn list_flags(a: &SimArgs, attacked: Option<&String>) -> Result<Vec<ListFlag>> {
    let specs: [(&'static str, Option<&String>, Option<&'static str>, Option<SweepVar>); 6] = [
        ("objects", a.objects.as_ref(), Some("objects"), Some(SweepVar::Objects)),
        ("churn", a.churn.as_ref(), Some("churn_per_year"), Some(SweepVar::Churn)),
        ("cache-ttl", a.cache_ttl.as_ref(), Some("cache_ttl_hours"), Some(SweepVar::CacheTtl)),
        ("byzantine", a.byzantine.as_ref(), Some("byzantine_fraction"), Some(SweepVar::Byzantine)),
        ("r-group", a.r_group.as_ref(), Some("codec.r_group"), None),
        ("attacked", attacked, None, Some(SweepVar::Attacked)),
    ];
    let mut out = Vec::new();
    for (name, raw, key, var) in specs {
        if let Some(s) = raw {
            out.push(ListFlag {
                name,
                key,
                var,
                values: parse_list(name, s, a.points)?,
            });
        }
    }
    Ok(out)
}

fn json_number(key: &str, v: f64) -> Result<Value> {
    if key == "objects" || key == "codec.r_group" {
        if v < 0.0 || v.fract() != 0.0 {
            return usage(format!("{key} must be a whole number, got {v}"));
        }
        return Ok(json!(v as u64));
    }
    Ok(json!(v))
}

struct Plan {
    cfg: SimConfig,
    /// Swept flag name, its variable and values.
    sweep: Option<(String, Option<SweepVar>, Vec<f64>)>,
}

/// Resolves the config and picks the sweep. `allowed` lists the flags this
/// command may sweep, the first being the default with `default_values`.
fn plan(a: &SimArgs, attacked: Option<&String>, allowed: &[&str], default_values: &[f64]) -> Result<Plan> {
    let lists = list_flags(a, attacked)?;
    let multi: Vec<&ListFlag> = lists.iter().filter(|l| l.values.len() > 1).collect();
    if multi.len() > 1 {
        return usage(format!(
            "only one flag may list several values, got --{} and --{}",
            multi[0].name, multi[1].name
        ));
    }
    let swept: Option<&ListFlag> = match multi.first() {
        Some(l) if !allowed.contains(&l.name) => {
            return usage(format!("--{} cannot be swept here; allowed: {}", l.name, allowed.join(", ")))
        }
        Some(l) => Some(l),
        None => allowed.iter().find_map(|n| lists.iter().find(|l| l.name == *n)),
    };

    let mut flags: Vec<(&str, Value)> = Vec::new();
    if let Some(s) = a.seed {
        flags.push(("seed", json!(s)));
    }
    if let Some(n) = a.nodes {
        flags.push(("nodes", json!(n)));
    }
    if let Some(y) = a.years {
        flags.push(("years", json!(y)));
    }
    if let Some(k) = a.k_inner {
        flags.push(("codec.k_inner", json!(k)));
    }
    if let Some(o) = &a.outer {
        let (n, k) = parse_outer(o)?;
        flags.push(("codec.n_chunks", json!(n)));
        flags.push(("codec.k_outer", json!(k)));
    }
    if let Some(l) = &a.lottery {
        let lot = match l.as_str() {
            "prg" => Lottery::Prg,
            "vrf" => Lottery::Vrf,
            other => return usage(format!("--lottery must be prg or vrf, got {other:?}")),
        };
        flags.push(("lottery", serde_json::to_value(lot)?));
    }
    for l in &lists {
        let is_swept = swept.is_some_and(|s| s.name == l.name);
        match (l.key, is_swept) {
            (Some(key), false) => flags.push((key, json_number(key, l.values[0])?)),
            (None, false) => return usage(format!("--{} is not used by this command", l.name)),
            _ => {}
        }
    }
    let cfg: SimConfig = resolve(&SimConfig::default(), a.config.as_deref(), &flags)?;
    cfg.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    let sweep = match (swept, allowed.first()) {
        (Some(l), _) => Some((l.name.to_string(), l.var, l.values.clone())),
        (None, Some(first)) => {
            let var = lists_var(first);
            Some((first.to_string(), var, default_values.to_vec()))
        }
        (None, None) => None,
    };
    Ok(Plan { cfg, sweep })
}

fn lists_var(name: &str) -> Option<SweepVar> {
    match name {
        "objects" => Some(SweepVar::Objects),
        "churn" => Some(SweepVar::Churn),
        "cache-ttl" => Some(SweepVar::CacheTtl),
        "byzantine" => Some(SweepVar::Byzantine),
        "attacked" => Some(SweepVar::Attacked),
        _ => None,
    }
}

fn systems(a: &SimArgs, fixed: Option<System>) -> Result<Vec<System>> {
    match (a.system.as_deref(), fixed) {
        (None, Some(s)) => Ok(vec![s]),
        (Some(x), Some(s)) if x == s.name() => Ok(vec![s]),
        (Some(x), Some(s)) => usage(format!("this command only runs --system {}, got {x:?}", s.name())),
        (Some("both"), None) => Ok(vec![System::Entropy, System::Baseline]),
        (None | Some("entropy"), None) => Ok(vec![System::Entropy]),
        (Some("baseline"), None) => Ok(vec![System::Baseline]),
        (Some(x), None) => usage(format!("--system must be entropy, baseline or both, got {x:?}")),
    }
}

fn seed_list(cfg: &SimConfig, n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return usage("--seeds must be at least 1");
    }
    Ok((0..n).map(|i| cfg.seed.wrapping_add(i)).collect())
}

fn parse_strategy(s: Option<&str>) -> Result<AttackStrategy> {
    match s {
        None | Some("omniscient-greedy") => Ok(AttackStrategy::OmniscientGreedy),
        Some("random") => Ok(AttackStrategy::Random),
        Some(x) => usage(format!("--strategy must be omniscient-greedy or random, got {x:?}")),
    }
}

fn run_sweeps(
    command: &str,
    a: &SimArgs,
    plan: Plan,
    systems: Vec<System>,
    strategy: AttackStrategy,
    extra: Value,
) -> Result<Vec<String>> {
    let (_, var, values) = plan.sweep.expect("sweep commands always sweep");
    let var = var.expect("sweepable flags map to a sweep variable");
    let seeds = seed_list(&plan.cfg, a.seeds)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    for &s in &systems {
        rows.extend(sweep(&plan.cfg, s, var, &values, &seeds, strategy).map_err(|e| CliError::Invalid(e.to_string()))?);
    }
    let mut m = RunManifest::new(command, serde_json::to_value(&plan.cfg)?, plan.cfg.seed, seeds);
    m.systems = systems.iter().map(|s| s.name().to_string()).collect();
    m.sweep = Some(SweepSpec {
        var: var.name().to_string(),
        values,
    });
    m.extra = extra;
    let file = command.rsplit(' ').next().unwrap_or(command);
    let (c, j) = write_outputs(&a.out, file, &SWEEP_COLUMNS, &rows, m)?;
    Ok(vec![c.display().to_string(), j.display().to_string()])
}

pub fn run(cmd: SimCommand) -> Result<Vec<String>> {
    const OBJECTS: [f64; 5] = [20.0, 40.0, 60.0, 80.0, 100.0];
    match cmd {
        SimCommand::RepairTraffic(a) => {
            let p = plan(&a, None, &["objects", "churn", "cache-ttl"], &OBJECTS)?;
            let sys = systems(&a, None)?;
            run_sweeps("sim repair-traffic", &a, p, sys, AttackStrategy::default(), Value::Null)
        }
        SimCommand::Baseline(a) => {
            let p = plan(&a, None, &["objects", "churn", "byzantine"], &OBJECTS)?;
            let sys = systems(&a, Some(System::Baseline))?;
            run_sweeps("sim baseline", &a, p, sys, AttackStrategy::default(), Value::Null)
        }
        SimCommand::Byzantine(a) => {
            let defaults = [0.0, 0.01, 0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.33, 0.4, 0.5];
            let p = plan(&a, None, &["byzantine"], &defaults)?;
            let sys = systems(&a, None)?;
            run_sweeps("sim byzantine", &a, p, sys, AttackStrategy::default(), Value::Null)
        }
        SimCommand::Targeted(t) => {
            let defaults = [0.02, 0.05, 0.1, 0.15, 0.2, 0.25];
            let p = plan(&t.sim, t.attacked.as_ref(), &["attacked"], &defaults)?;
            let sys = systems(&t.sim, None)?;
            let strategy = parse_strategy(t.strategy.as_deref())?;
            let extra = json!({ "strategy": strategy });
            run_sweeps("sim targeted", &t.sim, p, sys, strategy, extra)
        }
        SimCommand::Trace(t) => run_trace(t),
    }
}

fn run_trace(t: TraceArgs) -> Result<Vec<String>> {
    let a = &t.sim;
    if a.system.as_deref().is_some_and(|s| s != "entropy") {
        return usage("trace only runs --system entropy");
    }
    let p = plan(a, None, &["r-group"], &[])?;
    let r_values: Vec<usize> = match &p.sweep {
        Some((_, _, v)) if !v.is_empty() => v.iter().map(|x| *x as usize).collect(),
        _ => vec![p.cfg.codec.r_group],
    };
    let group = t.group.unwrap_or(p.cfg.trace_group);
    let seeds = seed_list(&p.cfg, a.seeds)?;
    let mut rows = Vec::new();
    for &r in &r_values {
        let mut cfg = p.cfg.clone();
        cfg.codec.r_group = r;
        cfg.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        for &seed in &seeds {
            cfg.seed = seed;
            let trace = trace_fragments(&cfg, group, cfg.years).map_err(|e| CliError::Invalid(e.to_string()))?;
            if trace.is_empty() {
                return Err(CliError::Invalid(format!("group {group} does not exist")));
            }
            rows.extend(trace.into_iter().map(|pt| TraceRow {
                config: format!("r_group={r}"),
                seed,
                hours: pt.hours,
                alive_honest: pt.alive_honest,
            }));
        }
    }
    let mut m = RunManifest::new("sim trace", serde_json::to_value(&p.cfg)?, p.cfg.seed, seeds);
    m.systems = vec!["entropy".into()];
    m.sweep = Some(SweepSpec {
        var: "r_group".into(),
        values: r_values.iter().map(|&r| r as f64).collect(),
    });
    m.extra = json!({ "group": group });
    let (c, j) = write_outputs(&a.out, "trace", &TRACE_COLUMNS, &rows, m)?;
    Ok(vec![c.display().to_string(), j.display().to_string()])
}
