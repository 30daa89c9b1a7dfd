//! Analytical durability of chunk groups and objects.
//!
//! A group of `n` members is tracked by its Byzantine count `b`. States
//! `b = 0..=n-k` are transient; one extra absorbing state stands for "fewer
//! than `k` honest members", after which the chunk cannot be rebuilt.
//!
//! One step of the chain is a precisely stated generative model:
//!
//! 1. honest members churn: `C ~ Poisson(λ · honest)`; if fewer than `k`
//!    honest remain the group is absorbed;
//! 2. `min(Υ, size)` members are evicted uniformly at random; again,
//!    fewer than `k` honest left means absorbed;
//! 3. the group refills to `n` by drawing uniformly, without replacement,
//!    from all nodes that are not current members (churned nodes are
//!    replaced by fresh honest ones, so the population keeps `F` Byzantine
//!    nodes out of `N`).
//!
//! Byzantine members never churn. [`montecarlo`] simulates the same step on
//! explicit node sets and serves as the oracle for every closed form here.

pub mod montecarlo;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{ln_choose, ln_gamma, Scalar};

pub use montecarlo::{mc_absorption, mc_attack, mc_transition_row, McEstimate};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("invalid parameters: {0}")]
    Invalid(String),
}

/// Group-chain parameters. `lambda` is the churn rate per honest member per step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtmcParams {
    #[serde(rename = "N")]
    pub total: u64,
    #[serde(rename = "F")]
    pub byzantine: u64,
    pub n: u64,
    pub k: u64,
    pub lambda: f64,
    #[serde(rename = "evict")]
    pub evictions: u64,
    pub t: u64,
}

impl CtmcParams {
    /// Byzantine count defaults to a third of the network.
    pub fn new(total: u64, n: u64, k: u64, lambda: f64, evictions: u64, t: u64) -> CtmcParams {
        CtmcParams {
            total,
            byzantine: total / 3,
            n,
            k,
            lambda,
            evictions,
            t,
        }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |m: String| Err(AnalysisError::Invalid(m));
        if self.byzantine > self.total {
            return bad(format!("F = {} exceeds N = {}", self.byzantine, self.total));
        }
        if self.k == 0 || self.k > self.n || self.n > self.total {
            return bad(format!("need 1 <= k <= n <= N, got k={} n={} N={}", self.k, self.n, self.total));
        }
        if self.evictions > self.n {
            return bad(format!("eviction count {} exceeds group size {}", self.evictions, self.n));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("churn rate must be finite and >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    /// Number of chain states: `n - k + 1` transient plus one absorbing.
    pub fn states(&self) -> usize {
        (self.n - self.k + 2) as usize
    }

    pub fn absorbing(&self) -> usize {
        self.states() - 1
    }
}

/// Probability vector over the chain states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector<T: Scalar>(pub Vec<T>);

impl<T: Scalar> StateVector<T> {
    pub fn absorbing(&self) -> T {
        *self.0.last().expect("state vector is never empty")
    }

    pub fn total(&self) -> T {
        self.0.iter().copied().sum()
    }
}

/// Dense row-stochastic matrix; row `i` is the distribution after one step from state `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T: Scalar> {
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> TransitionMatrix<T> {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![T::zero(); dim * dim];
        for i in 0..dim {
            data[i * dim + i] = T::one();
        }
        TransitionMatrix { dim, data }
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// `v · Θ`.
    pub fn apply(&self, v: &StateVector<T>) -> StateVector<T> {
        let mut out = vec![T::zero(); self.dim];
        for (i, &vi) in v.0.iter().enumerate() {
            if vi == T::zero() {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o = *o + vi * m;
            }
        }
        StateVector(out)
    }
}

fn hypergeom_pmf<T: Scalar>(pop: u64, succ: u64, draws: u64, x: u64) -> T {
    if succ > pop || draws > pop || x > succ || x > draws || draws - x > pop - succ {
        return T::zero();
    }
    let l: T = ln_choose::<T>(succ, x) + ln_choose::<T>(pop - succ, draws - x) - ln_choose::<T>(pop, draws);
    l.exp()
}

fn poisson_pmf<T: Scalar>(mean: T, c: u64) -> T {
    if mean == T::zero() {
        return if c == 0 { T::one() } else { T::zero() };
    }
    let c_t = T::of(c as f64);
    (c_t * mean.ln() - mean - ln_gamma(c_t + T::one())).exp()
}

/// Initial distribution of the group's Byzantine count: hypergeometric for
/// `b <= n-k`, the remaining tail in the absorbing entry.
pub fn initial_vector<T: Scalar>(p: &CtmcParams) -> Result<StateVector<T>, AnalysisError> {
    p.validate()?;
    let mut v: Vec<T> = (0..=p.n - p.k)
        .map(|b| hypergeom_pmf(p.total, p.byzantine, p.n, b))
        .collect();
    v.push(hypergeom_tail(p.total, p.byzantine, p.n, p.k));
    Ok(StateVector(v))
}

/// Exact `P(b > n-k)` for a uniformly drawn group of `n` out of `N` with `F` Byzantine.
pub fn hypergeom_tail<T: Scalar>(total: u64, byzantine: u64, n: u64, k: u64) -> T {
    if k == 0 {
        return T::zero();
    }
    (n - k + 1..=n.min(byzantine))
        .map(|b| hypergeom_pmf::<T>(total, byzantine, n, b))
        .sum()
}

/// Hoeffding bound `exp(-2 (2n/3 - k)^2 / n)` on the tail above; 1 when `k >= 2n/3`.
pub fn hoeffding_bound<T: Scalar>(n: u64, k: u64) -> T {
    let n_t = T::of(n as f64);
    let gap = T::of(2.0) * n_t / T::of(3.0) - T::of(k as f64);
    if gap <= T::zero() {
        return T::one();
    }
    (-T::of(2.0) * gap * gap / n_t).exp()
}

/// One-step transition matrix by exact enumeration of churn, eviction and refill.
pub fn transition_matrix<T: Scalar>(p: &CtmcParams) -> Result<TransitionMatrix<T>, AnalysisError> {
    p.validate()?;
    let (n, k) = (p.n, p.k);
    let dim = p.states();
    let abs = p.absorbing();
    let mut data = vec![T::zero(); dim * dim];
    for i in 0..=n - k {
        let honest = n - i;
        let row = &mut data[i as usize * dim..(i as usize + 1) * dim];
        if i > p.byzantine {
            // Unreachable with only F Byzantine nodes in the network.
            row[i as usize] = T::one();
            continue;
        }
        let mean = T::of(p.lambda * honest as f64);
        for c in 0..=honest - k {
            let pc = poisson_pmf(mean, c);
            if pc == T::zero() {
                continue;
            }
            let size = n - c;
            let e = p.evictions.min(size);
            let h_left = honest - c;
            // u honest and e-u Byzantine members evicted.
            for u in e.saturating_sub(i)..=e.min(h_left) {
                if h_left - u < k {
                    continue;
                }
                let pe: T = hypergeom_pmf(size, h_left, e, u);
                if pe == T::zero() {
                    continue;
                }
                let byz = i - (e - u);
                let members = size - e;
                let draws = n - members;
                let pool = p.total - members;
                let pool_byz = p.byzantine - byz;
                for x in 0..=draws.min(pool_byz) {
                    let px: T = hypergeom_pmf(pool, pool_byz, draws, x);
                    let j = (byz + x) as usize;
                    row[j] = row[j] + pc * pe * px;
                }
            }
        }
        let transient: T = row[..abs].iter().copied().sum();
        row[abs] = (T::one() - transient).max(T::zero());
    }
    data[abs * dim + abs] = T::one();
    Ok(TransitionMatrix { dim, data })
}

/// How absorption over a horizon is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbsorptionForm {
    /// Absorbing entry of `I·Θ^t`: the probability of having been absorbed by step `t`.
    #[default]
    Cumulative,
    /// `Σ_{s=1..t} (I·Θ^s)_abs`, which counts an absorbed group once per
    /// step. Kept for comparison with results computed that way.
    SummedSteps,
}

pub fn absorption_probability<T: Scalar>(
    initial: &StateVector<T>,
    theta: &TransitionMatrix<T>,
    t: u64,
    form: AbsorptionForm,
) -> T {
    let mut v = initial.clone();
    let mut summed = T::zero();
    for _ in 0..t {
        v = theta.apply(&v);
        summed = summed + v.absorbing();
    }
    match form {
        AbsorptionForm::Cumulative => v.absorbing(),
        AbsorptionForm::SummedSteps => summed,
    }
}

/// Absorption probability for `params` over its own horizon.
pub fn group_loss_probability<T: Scalar>(p: &CtmcParams, form: AbsorptionForm) -> Result<T, AnalysisError> {
    let v = initial_vector::<T>(p)?;
    let theta = transition_matrix::<T>(p)?;
    Ok(absorption_probability(&v, &theta, p.t, form))
}

/// `1 - (1 - p)^(K+R)`: some chunk group of an object is absorbed.
pub fn object_durability_bound<T: Scalar>(p_group: T, outer_k: u64, outer_r: u64) -> T {
    if p_group >= T::one() {
        return T::one();
    }
    let m = T::of((outer_k + outer_r) as f64);
    -(m * (-p_group).ln_1p()).exp_m1()
}

/// Targeted-attack parameters. `phi_mu` is the number of chunk groups the
/// attacker can push into the absorbing state (`Φ · μ`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub omega: u64,
    #[serde(rename = "K")]
    pub outer_k: u64,
    #[serde(rename = "R")]
    pub outer_r: u64,
    pub phi_mu: u64,
}

/// Groups an attacker with `phi` node removals can absorb on average.
/// A group holds about `2n/3` honest members, so absorbing one costs
/// `2n/3 - k + 1` removals.
pub fn attackable_groups(phi: u64, n: u64, k: u64) -> u64 {
    let cost = (2.0 * n as f64 / 3.0 - k as f64 + 1.0).max(1.0);
    (phi as f64 / cost).floor() as u64
}

/// Birthday-style bound on losing some object when `phi_mu` chunk groups
/// out of `Ω (K+R)` are absorbed.
pub fn targeted_attack_bound<T: Scalar>(a: &AttackParams) -> T {
    let (kr, r) = (a.outer_k + a.outer_r, a.outer_r);
    if a.phi_mu <= r || a.omega == 0 {
        return T::zero();
    }
    let total = a.omega * kr;
    // ln of the chance that R further chunks land in the first one's object.
    let mut ln_p = T::zero();
    for i in 1..=r {
        if kr <= i {
            return T::zero();
        }
        ln_p = ln_p + (T::of((kr - i) as f64) / T::of((total - i) as f64)).ln();
    }
    let p = ln_p.exp();
    let ln_m: T = ln_choose(a.phi_mu, r + 1);
    let exponent = ln_m.exp() * (-p).ln_1p();
    if exponent.is_infinite() {
        return T::one();
    }
    -exponent.exp_m1()
}

/// Converts a per-node yearly failure rate into the per-member per-step
/// rate used by the chain, for a step of `step_hours`.
pub fn per_step_rate(per_node_year: f64, step_hours: f64) -> f64 {
    per_node_year * step_hours / (365.0 * 24.0)
}
