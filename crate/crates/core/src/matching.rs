//! Primal-dual edge-weighted online bipartite matching with free disposal,
//! driven by the fractional selector.
//!
//! For every offline vertex `i` and weight level `w` the algorithm tracks the
//! law of `(x_i(w), c_i(w))`: the mass of selections offered at level `w` or
//! above since the last reset, and the accumulated reset factor. The law is a
//! short list of atoms, constant between the distinct weights seen so far.
//! From it follow `y_i(w) = E[c f(x)]`, an upper bound on the probability
//! that `i` is unmatched at level `w`, and `alpha_i(w) = E[c a(x)]`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocs::{mix_seed, ElementId, OcsModel, OcsState};
use crate::ratios::DualCurves;

pub const DUALITY_TOL: f64 = 1e-8;
const PRUNE_MASS: f64 = 1e-14;
const BISECTION_TOL: f64 = 1e-12;
const MAX_BISECTION: usize = 200;
pub const MAX_OPT_OFFLINE: usize = 12;
pub const MAX_OPT_ONLINE: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub offline: Vec<String>,
    /// `weights[j][i]`: weight between online vertex `j` and offline vertex `i`.
    pub weights: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    offline: Vec<String>,
    arrivals: Vec<ArrivalFile>,
}

#[derive(Serialize, Deserialize)]
struct ArrivalFile {
    weights: BTreeMap<String, f64>,
}

impl Instance {
    pub fn new(offline: Vec<String>, weights: Vec<Vec<f64>>) -> Result<Self> {
        let instance = Self { offline, weights };
        instance.validate()?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.offline.len();
        let mut ids = self.offline.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != n {
            return Err(Error::Malformed("duplicate offline id".into()));
        }
        for row in &self.weights {
            if row.len() != n {
                return Err(Error::Malformed("weight row length differs from offline count".into()));
            }
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Malformed("weights must be finite and nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn num_offline(&self) -> usize {
        self.offline.len()
    }

    pub fn num_online(&self) -> usize {
        self.weights.len()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        let index: BTreeMap<&str, usize> =
            file.offline.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut weights = Vec::with_capacity(file.arrivals.len());
        for arrival in &file.arrivals {
            let mut row = vec![0.0; file.offline.len()];
            for (id, &w) in &arrival.weights {
                let i = *index
                    .get(id.as_str())
                    .ok_or_else(|| Error::Malformed(format!("unknown offline id {id}")))?;
                row[i] = w;
            }
            weights.push(row);
        }
        Self::new(file.offline.clone(), weights)
    }

    pub fn to_json(&self) -> String {
        let file = InstanceFile {
            offline: self.offline.clone(),
            arrivals: self
                .weights
                .iter()
                .map(|row| ArrivalFile {
                    weights: row
                        .iter()
                        .enumerate()
                        .filter(|(_, &w)| w > 0.0)
                        .map(|(i, &w)| (self.offline[i].clone(), w))
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("instance serializes")
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i}")).collect()
    }

    /// Online vertex `j` has unit weight to offline `i` iff
    /// `i >= floor(j * n_offline / n_online)`.
    pub fn upper_triangular(n_offline: usize, n_online: usize) -> Self {
        let weights = (0..n_online)
            .map(|j| {
                let level = j * n_offline / n_online;
                (0..n_offline).map(|i| if i >= level { 1.0 } else { 0.0 }).collect()
            })
            .collect();
        Self { offline: Self::ids(n_offline), weights }
    }

    /// Each edge present with probability `density`, weight uniform on
    /// `{0.01, ..., 1.00}`.
    pub fn random_uniform<R: Rng + ?Sized>(rng: &mut R, n_offline: usize, n_online: usize, density: f64) -> Self {
        let weights = (0..n_online)
            .map(|_| {
                (0..n_offline)
                    .map(|_| {
                        if rng.random::<f64>() < density {
                            rng.random_range(1..=100) as f64 / 100.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self { offline: Self::ids(n_offline), weights }
    }

    /// Online vertices copy one of three weight templates drawn from
    /// `{0, 1, 2, 3}`, so equal weights repeat heavily.
    pub fn duplicate_heavy<R: Rng + ?Sized>(rng: &mut R, n_offline: usize, n_online: usize) -> Self {
        let templates: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n_offline).map(|_| rng.random_range(0..4) as f64).collect())
            .collect();
        let weights = (0..n_online).map(|_| templates[rng.random_range(0..3)].clone()).collect();
        Self { offline: Self::ids(n_offline), weights }
    }
}

/// Maximum-weight one-to-one matching value, which equals the free-disposal
/// optimum.
pub fn opt_offline(instance: &Instance) -> Result<f64> {
    let (n, m) = (instance.num_offline(), instance.num_online());
    if n > MAX_OPT_OFFLINE || m > MAX_OPT_ONLINE {
        return Err(Error::InstanceTooLarge(format!("{n} x {m} exceeds {MAX_OPT_OFFLINE} x {MAX_OPT_ONLINE}")));
    }
    if n == 0 || m == 0 {
        return Ok(0.0);
    }
    // Rows are offline vertices; n extra zero-weight columns stand for
    // "unmatched", so every row can be assigned.
    let cols = m + n;
    let cost = |i: usize, j: usize| if j < m { -instance.weights[j][i] } else { 0.0 };
    let assignment = hungarian(n, cols, cost);
    Ok(assignment
        .iter()
        .enumerate()
        .filter(|&(_, &j)| j < m)
        .map(|(i, &j)| instance.weights[j][i])
        .sum())
}

/// Minimum-cost assignment of `rows <= cols` rows to distinct columns by the
/// shortest augmenting path method with potentials. Returns each row's column.
fn hungarian(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // Column j (1-based) is matched to row p[j] (1-based, 0 = free).
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; rows];
    for j in 1..=cols {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub x: f64,
    pub q: f64,
    pub cbar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLevelProfile {
    pub atoms: Vec<Atom>,
}

impl WeightLevelProfile {
    pub fn fresh() -> Self {
        Self { atoms: vec![Atom { x: 0.0, q: 1.0, cbar: 1.0 }] }
    }

    pub fn y(&self, curves: &DualCurves) -> f64 {
        self.atoms.iter().map(|a| a.q * a.cbar * curves.f(a.x)).sum()
    }

    pub fn alpha(&self, curves: &DualCurves) -> f64 {
        self.atoms.iter().map(|a| a.q * a.cbar * curves.a(a.x)).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.q).sum()
    }

    fn shift(&mut self, dx: f64) {
        for a in &mut self.atoms {
            a.x += dx;
        }
    }

    /// With probability `rho` the pair `(x, c)` becomes `(0, c f(x))`.
    fn reset(&mut self, rho: f64, curves: &DualCurves) {
        if rho <= 0.0 {
            return;
        }
        let reset_c: f64 = self.atoms.iter().map(|a| a.q * a.cbar * curves.f(a.x)).sum();
        let mut zero_q = rho;
        let mut zero_c = rho * reset_c;
        let mut kept = Vec::with_capacity(self.atoms.len() + 1);
        for a in &self.atoms {
            let q = (1.0 - rho) * a.q;
            if a.x == 0.0 {
                zero_q += q;
                zero_c += q * a.cbar;
            } else if q > 0.0 {
                kept.push(Atom { x: a.x, q, cbar: a.cbar });
            }
        }
        kept.insert(0, Atom { x: 0.0, q: zero_q, cbar: zero_c / zero_q });
        self.atoms = kept;
    }

    fn prune(&mut self) {
        if self.atoms.iter().any(|a| a.q < PRUNE_MASS) {
            self.atoms.retain(|a| a.q >= PRUNE_MASS);
            let total = self.total_mass();
            for a in &mut self.atoms {
                a.q /= total;
            }
        }
    }
}

/// Per offline vertex: profiles on `(b_k, b_{k+1}]` for breakpoints
/// `0 = b_0 < b_1 < ... < b_L`, plus the unbounded level above `b_L`, which
/// only ever sees resets of fresh atoms and so stays fresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineState {
    pub breakpoints: Vec<f64>,
    pub profiles: Vec<WeightLevelProfile>,
}

impl Default for OfflineState {
    fn default() -> Self {
        Self { breakpoints: vec![0.0], profiles: Vec::new() }
    }
}

impl OfflineState {
    /// `alpha_i = int (Gamma - alpha_i(w)) dw`.
    pub fn alpha(&self, gamma: f64, curves: &DualCurves) -> f64 {
        self.profiles
            .iter()
            .enumerate()
            .map(|(k, prof)| (self.breakpoints[k + 1] - self.breakpoints[k]) * (gamma - prof.alpha(curves)))
            .sum()
    }

    /// `int (1 - y_i(w)) dw`: this vertex's share of the primal.
    pub fn primal(&self, curves: &DualCurves) -> f64 {
        self.profiles
            .iter()
            .enumerate()
            .map(|(k, prof)| (self.breakpoints[k + 1] - self.breakpoints[k]) * (1.0 - prof.y(curves)))
            .sum()
    }

    /// Profile in force at level `w > 0`.
    pub fn profile_at(&self, w: f64) -> Option<&WeightLevelProfile> {
        let k = self.breakpoints.partition_point(|&b| b < w);
        (k >= 1).then(|| self.profiles.get(k - 1)).flatten()
    }

    pub fn y_at(&self, w: f64, curves: &DualCurves) -> f64 {
        self.profile_at(w).map_or(1.0, |p| p.y(curves))
    }

    fn ensure_breakpoint(&mut self, w: f64) -> usize {
        match self.breakpoints.binary_search_by(|b| b.total_cmp(&w)) {
            Ok(k) => k,
            Err(k) => {
                let profile = self.profiles.get(k - 1).cloned().unwrap_or_else(WeightLevelProfile::fresh);
                self.breakpoints.insert(k, w);
                self.profiles.insert(k - 1, profile);
                k
            }
        }
    }

    /// Levels `w <= weight` shift by `p`; higher levels reset with
    /// probability `min(r p, 1)`.
    pub fn apply_arrival(&mut self, weight: f64, p: f64, r: f64, curves: &DualCurves) {
        if p <= 0.0 {
            return;
        }
        let top = if weight > 0.0 { self.ensure_breakpoint(weight) } else { 0 };
        let rho = (r * p).min(1.0);
        for (k, prof) in self.profiles.iter_mut().enumerate() {
            if k < top {
                prof.shift(p);
            } else {
                prof.reset(rho, curves);
            }
            prof.prune();
        }
    }

    /// `alpha_i` after a hypothetical arrival with selection mass `p`, without
    /// materializing the new state.
    fn alpha_after(cache: &AlphaCache, p: f64, r: f64, gamma: f64, curves: &DualCurves) -> f64 {
        let rho = (r * p).min(1.0);
        let low: f64 = cache.low_atoms.iter().map(|&(x, wt)| wt * curves.a(x + p)).sum();
        cache.low_length * gamma - low + cache.high_base + rho * cache.high_reset
    }
}

/// Level-independent pieces of `alpha_i[p]` for one vertex and one arrival.
struct AlphaCache {
    /// Distinct `x` values at levels `w <= weight`, weighted by level
    /// length times `q cbar`.
    low_atoms: Vec<(f64, f64)>,
    low_length: f64,
    /// `sum len (Gamma - alpha_k)` over higher levels.
    high_base: f64,
    /// `sum len (alpha_k - Gamma y_k)`: the change per unit reset probability.
    high_reset: f64,
}

impl AlphaCache {
    fn new(state: &OfflineState, weight: f64, gamma: f64, curves: &DualCurves) -> Self {
        let mut atoms: Vec<(f64, f64)> = Vec::new();
        let mut low_length = 0.0;
        let mut high_base = 0.0;
        let mut high_reset = 0.0;
        for (k, prof) in state.profiles.iter().enumerate() {
            let (lo, hi) = (state.breakpoints[k], state.breakpoints[k + 1]);
            if hi <= weight {
                low_length += hi - lo;
                atoms.extend(prof.atoms.iter().map(|a| (a.x, (hi - lo) * a.q * a.cbar)));
            } else {
                // A level straddling `weight` splits into a shifted and a reset part.
                let shifted = (weight - lo).max(0.0);
                if shifted > 0.0 {
                    low_length += shifted;
                    atoms.extend(prof.atoms.iter().map(|a| (a.x, shifted * a.q * a.cbar)));
                }
                let len = hi - lo.max(weight);
                let (al, y) = (prof.alpha(curves), prof.y(curves));
                high_base += len * (gamma - al);
                high_reset += len * (al - gamma * y);
            }
        }
        let top = *state.breakpoints.last().unwrap_or(&0.0);
        if weight > top {
            low_length += weight - top;
            atoms.push((0.0, weight - top));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut low_atoms: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (x, w) in atoms {
            match low_atoms.last_mut() {
                Some(last) if last.0 == x => last.1 += w,
                _ => low_atoms.push((x, w)),
            }
        }
        Self { low_atoms, low_length, high_base, high_reset }
    }
}

/// Selection probabilities and `beta_j` for one arrival.
///
/// Each vertex's `Gamma w_ij - alpha_i[p]` is nonincreasing in `p`, so for a
/// candidate `beta` the smallest `p_i` bringing it down to `beta` is found by
/// bisection; an outer bisection on `beta` makes the `p_i` sum to one unless
/// they already fit at `beta = 0`.
pub fn choose_p(
    states: &[OfflineState],
    weights: &[f64],
    gamma: f64,
    r: f64,
    curves: &DualCurves,
) -> Result<(Vec<f64>, f64)> {
    let n = states.len();
    let caches: Vec<Option<AlphaCache>> = (0..n)
        .map(|i| (weights[i] > 0.0).then(|| AlphaCache::new(&states[i], weights[i], gamma, curves)))
        .collect();
    let gap = |i: usize, p: f64| -> f64 {
        match &caches[i] {
            Some(c) => gamma * weights[i] - OfflineState::alpha_after(c, p, r, gamma, curves),
            None => f64::NEG_INFINITY,
        }
    };
    let base: Vec<f64> = (0..n).map(|i| gap(i, 0.0)).collect();
    let p_at = |i: usize, beta: f64| -> Result<f64> {
        if base[i] <= beta {
            return Ok(0.0);
        }
        if gap(i, 1.0) > beta {
            return Ok(f64::INFINITY);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..MAX_BISECTION {
            if hi - lo <= BISECTION_TOL {
                return Ok(hi);
            }
            let mid = 0.5 * (lo + hi);
            if gap(i, mid) > beta { lo = mid } else { hi = mid }
        }
        Err(Error::Bisection(format!("p for vertex {i} at beta {beta}")))
    };
    let ps_at = |beta: f64| -> Result<Vec<f64>> { (0..n).map(|i| p_at(i, beta)).collect() };

    let p0 = ps_at(0.0)?;
    if p0.iter().sum::<f64>() <= 1.0 {
        return Ok((p0, 0.0));
    }
    let (mut lo, mut hi) = (0.0, base.iter().copied().fold(0.0, f64::max));
    for _ in 0..MAX_BISECTION {
        if hi - lo <= BISECTION_TOL {
            let p = ps_at(hi)?;
            return Ok((p, hi));
        }
        let mid = 0.5 * (lo + hi);
        if ps_at(mid)?.iter().sum::<f64>() > 1.0 { lo = mid } else { hi = mid }
    }
    Err(Error::Bisection("beta did not converge".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub p: Vec<f64>,
    pub beta: f64,
    /// `|beta_j - sum_i p_i (Gamma w_ij - alpha_i)|`.
    pub beta_sum_residual: f64,
    pub primal: f64,
    pub dual: f64,
    /// Smallest `alpha_i + beta_j - Gamma w_ij` right after the arrival.
    pub feasibility_slack: f64,
}

/// The deterministic part of a run: selection vectors and dual trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingPlan {
    pub gamma: f64,
    pub r: f64,
    pub steps: Vec<Step>,
    pub alpha: Vec<f64>,
    pub states: Vec<OfflineState>,
    /// Smallest `Delta P - Delta D` over steps.
    pub min_step_gap: f64,
    /// Smallest `alpha_i + beta_j - Gamma w_ij` over all pairs at termination.
    pub min_final_slack: f64,
    pub violations: Vec<String>,
}

impl MatchingPlan {
    pub fn primal(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.primal)
    }

    pub fn dual(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.dual)
    }
}

pub fn plan_matching(instance: &Instance, curves: &DualCurves, r: f64) -> Result<MatchingPlan> {
    instance.validate()?;
    let gamma = curves.gamma();
    let n = instance.num_offline();
    let mut states = vec![OfflineState::default(); n];
    let mut alpha = vec![0.0; n];
    let mut beta_total = 0.0;
    let mut primal = 0.0;
    let mut dual = 0.0;
    let mut steps = Vec::with_capacity(instance.num_online());
    let mut violations = Vec::new();
    let mut min_step_gap = f64::INFINITY;
    let mut betas = Vec::with_capacity(instance.num_online());

    for (j, weights) in instance.weights.iter().enumerate() {
        let (p, _) = choose_p(&states, weights, gamma, r, curves)?;
        for i in 0..n {
            states[i].apply_arrival(weights[i], p[i], r, curves);
        }
        let new_alpha: Vec<f64> = states.iter().map(|s| s.alpha(gamma, curves)).collect();
        for i in 0..n {
            if new_alpha[i] < alpha[i] - DUALITY_TOL {
                violations.push(format!("step {j}: alpha_{i} decreased by {:e}", alpha[i] - new_alpha[i]));
            }
            let mass: f64 = states[i].profiles.iter().map(|p| p.total_mass()).fold(1.0, |acc, m| {
                if (m - 1.0).abs() > (acc - 1.0).abs() { m } else { acc }
            });
            if (mass - 1.0).abs() > 1e-10 {
                violations.push(format!("step {j}: profile mass of {i} is {mass}"));
            }
        }
        alpha = new_alpha;
        let beta = (0..n).map(|i| gamma * weights[i] - alpha[i]).fold(0.0, f64::max);
        let beta_sum: f64 = (0..n)
            .filter(|&i| p[i] > 0.0)
            .map(|i| p[i] * (gamma * weights[i] - alpha[i]))
            .sum();
        let beta_sum_residual = (beta - beta_sum).abs();
        if beta_sum_residual > DUALITY_TOL {
            violations.push(format!("step {j}: beta {beta} differs from weighted sum {beta_sum}"));
        }
        beta_total += beta;
        betas.push(beta);

        let new_primal: f64 = states.iter().map(|s| s.primal(curves)).sum();
        let new_dual: f64 = alpha.iter().sum::<f64>() + beta_total;
        let gap = (new_primal - primal) - (new_dual - dual);
        min_step_gap = min_step_gap.min(gap);
        if gap < -DUALITY_TOL {
            violations.push(format!("step {j}: primal gain falls short of dual gain by {:e}", -gap));
        }
        primal = new_primal;
        dual = new_dual;
        let feasibility_slack = (0..n)
            .map(|i| alpha[i] + beta - gamma * weights[i])
            .fold(f64::INFINITY, f64::min);
        if feasibility_slack < -DUALITY_TOL {
            violations.push(format!("step {j}: dual infeasible by {:e}", -feasibility_slack));
        }
        steps.push(Step { p, beta, beta_sum_residual, primal, dual, feasibility_slack });
    }

    let mut min_final_slack = f64::INFINITY;
    for (j, weights) in instance.weights.iter().enumerate() {
        for i in 0..n {
            let slack = alpha[i] + betas[j] - gamma * weights[i];
            min_final_slack = min_final_slack.min(slack);
            if slack < -DUALITY_TOL {
                violations.push(format!("final: pair ({i}, {j}) infeasible by {:e}", -slack));
            }
        }
    }

    Ok(MatchingPlan { gamma, r, steps, alpha, states, min_step_gap, min_final_slack, violations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matched_weight: f64,
    /// Offline index selected for each arrival, if any.
    pub winners: Vec<Option<usize>>,
    /// Largest weight assigned to each offline vertex.
    pub assigned: Vec<f64>,
}

/// Feeds a plan's selection vectors to a fresh selector seeded by `seed`.
pub fn simulate_plan(instance: &Instance, plan: &MatchingPlan, model: &Arc<OcsModel>, seed: u64) -> Result<MatchResult> {
    let mut ocs = OcsState::new(Arc::clone(model), mix_seed(seed, 0x4D41_5443));
    let n = instance.num_offline();
    let mut assigned = vec![0.0f64; n];
    let mut winners = Vec::with_capacity(plan.steps.len());
    for (step, weights) in plan.steps.iter().zip(&instance.weights) {
        let probs: Vec<(ElementId, f64)> = step
            .p
            .iter()
            .enumerate()
            .filter(|&(_, &q)| q > 0.0)
            .map(|(i, &q)| (i as ElementId, q))
            .collect();
        let winner = ocs.continuous_step(&probs)?.map(|id| id as usize);
        if let Some(i) = winner {
            assigned[i] = assigned[i].max(weights[i]);
        }
        winners.push(winner);
    }
    Ok(MatchResult { matched_weight: assigned.iter().sum(), winners, assigned })
}

/// Plans and simulates one run, failing hard on any duality violation.
pub fn run_matching(instance: &Instance, curves: &DualCurves, model: &Arc<OcsModel>, seed: u64) -> Result<(MatchingPlan, MatchResult)> {
    let plan = plan_matching(instance, curves, model.m() as f64)?;
    if let Some(first) = plan.violations.first() {
        let step = plan.steps.len();
        return Err(Error::DualityViolation { step, detail: first.clone() });
    }
    let result = simulate_plan(instance, &plan, model, seed)?;
    Ok((plan, result))
}
