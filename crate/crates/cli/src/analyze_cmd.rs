use std::path::PathBuf;

use clap::{Args, Subcommand};
use entropy_core::analysis::{
    attackable_groups, group_loss_probability, hoeffding_bound, hypergeom_tail, mc_absorption, mc_attack,
    per_step_rate, targeted_attack_bound, AbsorptionForm, AttackParams, CtmcParams,
};
use serde_json::{json, Map, Value};

use crate::config::{env_seed, resolve};
use crate::error::{usage, CliError, Result};

const SIGMAS: f64 = 3.0;

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Absorption probability of one chunk group's chain.
    Ctmc(CtmcArgs),
    /// Bound on losing some object to a targeted attacker.
    Attack(AttackArgs),
    /// Hoeffding bound on a group starting with too few honest members.
    Bounds(BoundsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with parameter fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Adds Monte Carlo columns.
    #[arg(long)]
    pub validate: bool,
    #[arg(long, default_value_t = 100_000)]
    pub trials: u64,
    /// Monte Carlo seed; defaults to ENTROPY_SEED or 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// json or csv.
    #[arg(long, default_value = "json")]
    pub format: String,
    /// Also write the result here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Defaults model one hourly step of an 80-member group in a 1000-node
/// network with a third Byzantine, churning 20 times per node-year, for a year.
#[derive(Debug, Args)]
#[command(after_help = "Per-step lambda from a yearly rate r and a step of h hours: r * h / 8760.")]
pub struct CtmcArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "N")]
    pub total: Option<u64>,
    /// Byzantine nodes; defaults to N/3.
    #[arg(long = "F")]
    pub byzantine: Option<u64>,
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long)]
    pub k: Option<u64>,
    /// Churn per honest member per step.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Members evicted per step.
    #[arg(long)]
    pub evict: Option<u64>,
    /// Steps.
    #[arg(long)]
    pub t: Option<u64>,
    /// cumulative or summed-steps.
    #[arg(long, default_value = "cumulative")]
    pub absorption: String,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub omega: Option<u64>,
    /// Outer chunks needed to decode.
    #[arg(long = "K")]
    pub outer_k: Option<u64>,
    /// Outer redundancy chunks.
    #[arg(long = "R")]
    pub outer_r: Option<u64>,
    /// Groups the attacker can absorb.
    #[arg(long)]
    pub phi_mu: Option<u64>,
    /// Nodes the attacker can disable; converted to groups with --n, --k and --mu.
    #[arg(long, conflicts_with = "phi_mu")]
    pub phi: Option<u64>,
    #[arg(long, default_value_t = 80, requires = "phi")]
    pub n: u64,
    #[arg(long, default_value_t = 32, requires = "phi")]
    pub k: u64,
    #[arg(long, default_value_t = 1, requires = "phi")]
    pub mu: u64,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 80)]
    pub n: u64,
    #[arg(long, default_value_t = 32)]
    pub k: u64,
    /// Network size for the exact tail; defaults to 1000 with --validate.
    #[arg(long = "N")]
    pub total: Option<u64>,
    /// Byzantine nodes; defaults to N/3.
    #[arg(long = "F")]
    pub byzantine: Option<u64>,
}

fn seed(c: &Common) -> Result<u64> {
    match c.seed {
        Some(s) => Ok(s),
        None => env_seed(),
    }
}

fn mc_columns(out: &mut Map<String, Value>, mean: f64, stderr: f64, trials: u64, agrees: bool) {
    out.insert("mc_mean".into(), json!(mean));
    out.insert("mc_stderr".into(), json!(stderr));
    out.insert("mc_trials".into(), json!(trials));
    out.insert("agrees_3sigma".into(), json!(agrees));
}

fn ctmc(a: CtmcArgs) -> Result<Map<String, Value>> {
    let defaults = CtmcParams::new(1_000, 80, 32, per_step_rate(20.0, 1.0), 0, 8_760);
    let mut flags: Vec<(&str, Value)> = Vec::new();
    let pairs = [("N", a.total), ("n", a.n), ("k", a.k), ("evict", a.evict), ("t", a.t)];
    for (key, v) in pairs {
        if let Some(v) = v {
            flags.push((key, json!(v)));
        }
    }
    if let Some(l) = a.lambda {
        flags.push(("lambda", json!(l)));
    }
    let mut p: CtmcParams = resolve(&defaults, a.common.config.as_deref(), &flags)?;
    // F follows N unless given.
    let from_file = match &a.common.config {
        Some(path) => crate::config::read_json(path)?.get("F").is_some(),
        None => false,
    };
    match a.byzantine {
        Some(f) => p.byzantine = f,
        None if !from_file => p.byzantine = p.total / 3,
        None => {}
    }
    p.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
    let form = match a.absorption.as_str() {
        "cumulative" => AbsorptionForm::Cumulative,
        "summed-steps" => AbsorptionForm::SummedSteps,
        x => return usage(format!("--absorption must be cumulative or summed-steps, got {x:?}")),
    };
    if a.common.validate && form != AbsorptionForm::Cumulative {
        return usage("--validate compares against the cumulative form only");
    }
    let x: f64 = group_loss_probability(&p, form).map_err(|e| CliError::Invalid(e.to_string()))?;
    let mut out = Map::new();
    for (k, v) in [
        ("N", json!(p.total)),
        ("F", json!(p.byzantine)),
        ("n", json!(p.n)),
        ("k", json!(p.k)),
        ("lambda", json!(p.lambda)),
        ("evict", json!(p.evictions)),
        ("t", json!(p.t)),
        ("absorption_form", serde_json::to_value(form)?),
        ("initial_tail", json!(hypergeom_tail::<f64>(p.total, p.byzantine, p.n, p.k))),
        ("absorption", json!(x)),
    ] {
        out.insert(k.into(), v);
    }
    if a.common.validate {
        let s = seed(&a.common)?;
        let mc = mc_absorption(&p, a.common.trials, s).map_err(|e| CliError::Invalid(e.to_string()))?;
        mc_columns(&mut out, mc.mean, mc.stderr, mc.trials, mc.agrees(x, SIGMAS));
        out.insert("mc_seed".into(), json!(s));
    }
    Ok(out)
}

fn attack(a: AttackArgs) -> Result<Map<String, Value>> {
    let defaults = AttackParams {
        omega: 100,
        outer_k: 8,
        outer_r: 2,
        phi_mu: 1,
    };
    let mut flags: Vec<(&str, Value)> = Vec::new();
    for (key, v) in [("omega", a.omega), ("K", a.outer_k), ("R", a.outer_r), ("phi_mu", a.phi_mu)] {
        if let Some(v) = v {
            flags.push((key, json!(v)));
        }
    }
    if let Some(phi) = a.phi {
        flags.push(("phi_mu", json!(attackable_groups(phi, a.n, a.k) * a.mu)));
    }
    let p: AttackParams = resolve(&defaults, a.common.config.as_deref(), &flags)?;
    if p.outer_k == 0 {
        return Err(CliError::Invalid("K must be at least 1".into()));
    }
    let bound: f64 = targeted_attack_bound(&p);
    let mut out = Map::new();
    out.insert("omega".into(), json!(p.omega));
    out.insert("K".into(), json!(p.outer_k));
    out.insert("R".into(), json!(p.outer_r));
    out.insert("phi_mu".into(), json!(p.phi_mu));
    out.insert("bound".into(), json!(bound));
    if a.common.validate {
        let s = seed(&a.common)?;
        let mc = mc_attack(&p, a.common.trials, s);
        // A bound is validated by dominating the estimate, up to sampling error.
        let dominates = bound + SIGMAS * mc.stderr.max(1.0 / mc.trials as f64) >= mc.mean;
        mc_columns(&mut out, mc.mean, mc.stderr, mc.trials, dominates);
        out.insert("mc_seed".into(), json!(s));
    }
    Ok(out)
}

fn bounds(a: BoundsArgs) -> Result<Map<String, Value>> {
    if a.k == 0 || a.k > a.n {
        return usage("need 1 <= k <= n");
    }
    if a.common.config.is_some() {
        return usage("bounds takes its parameters from flags only");
    }
    let h: f64 = hoeffding_bound(a.n, a.k);
    let mut out = Map::new();
    out.insert("n".into(), json!(a.n));
    out.insert("k".into(), json!(a.k));
    out.insert("hoeffding".into(), json!(h));
    if a.common.validate || a.total.is_some() {
        let total = a.total.unwrap_or(1_000);
        let f = a.byzantine.unwrap_or(total / 3);
        if f > total || a.n > total {
            return Err(CliError::Invalid("need F <= N and n <= N".into()));
        }
        let exact: f64 = hypergeom_tail(total, f, a.n, a.k);
        out.insert("N".into(), json!(total));
        out.insert("F".into(), json!(f));
        out.insert("exact_tail".into(), json!(exact));
        out.insert("dominates".into(), json!(h >= exact));
    }
    Ok(out)
}

fn render(out: &Map<String, Value>, format: &str) -> Result<String> {
    match format {
        "json" => Ok(serde_json::to_string_pretty(out)? + "\n"),
        "csv" => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(out.keys())?;
            w.write_record(out.values().map(|v| match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            }))?;
            let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        x => usage(format!("--format must be json or csv, got {x:?}")),
    }
}

pub fn run(cmd: AnalyzeCommand) -> Result<String> {
    let (out, common_format, common_out) = match cmd {
        AnalyzeCommand::Ctmc(a) => {
            let (f, o) = (a.common.format.clone(), a.common.out.clone());
            (ctmc(a)?, f, o)
        }
        AnalyzeCommand::Attack(a) => {
            let (f, o) = (a.common.format.clone(), a.common.out.clone());
            (attack(a)?, f, o)
        }
        AnalyzeCommand::Bounds(a) => {
            let (f, o) = (a.common.format.clone(), a.common.out.clone());
            (bounds(a)?, f, o)
        }
    };
    let text = render(&out, &common_format)?;
    if let Some(path) = common_out {
        std::fs::write(&path, &text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(text)
}
