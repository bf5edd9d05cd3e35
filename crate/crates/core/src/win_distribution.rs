//! The seed process, the win function `W`, exact prefix laws and the
//! `F(n)` never-win table.
//!
//! The seed process keeps a counter `z`. At every step it either fires with
//! probability `p` (emitting `y = z` and resetting `z` to zero) or stays silent
//! (emitting `y = -1` and incrementing `z`). Emitted values are mapped through
//! the nondecreasing win function `W` to obtain the win sequence of an element.
//! The counter saturates at `y_max`; states above the cap are observationally
//! identical because `W` is evaluated at `min(y, y_max)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance under which two atoms of an [`ExactDistribution`] are merged.
pub const MERGE_TOLERANCE: f64 = 1e-14;

/// Slack below zero still accepted by [`check_small`].
pub const SMALL_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedParams {
    pub p: f64,
    pub m: usize,
    pub y_max: usize,
}

impl SeedParams {
    pub fn new(p: f64, m: usize, y_max: usize) -> Result<Self> {
        let params = Self { p, m, y_max };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::InvalidParameter(format!("p = {} must lie in (0, 1)", self.p)));
        }
        if self.m < 2 {
            return Err(Error::InvalidParameter(format!("m = {} must be at least 2", self.m)));
        }
        if self.y_max < 1 {
            return Err(Error::InvalidParameter("y_max must be at least 1".into()));
        }
        Ok(())
    }

    /// Law of the initial counter: geometric, with the tail merged into `y_max`.
    pub fn initial_law(&self) -> Vec<f64> {
        let q = 1.0 - self.p;
        let mut law: Vec<f64> = (0..self.y_max).map(|v| self.p * q.powi(v as i32)).collect();
        law.push(q.powi(self.y_max as i32));
        law
    }
}

/// Counter state of one seed sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedState {
    pub z: usize,
    pub k: u64,
}

impl SeedState {
    pub fn initial<R: Rng + ?Sized>(params: &SeedParams, rng: &mut R) -> Self {
        let mut z = 0;
        while z < params.y_max && rng.random::<f64>() >= params.p {
            z += 1;
        }
        Self { z, k: 1 }
    }

    /// Emits the next `y` and advances the counter.
    pub fn step<R: Rng + ?Sized>(&mut self, params: &SeedParams, rng: &mut R) -> i64 {
        self.k += 1;
        if rng.random::<f64>() < params.p {
            let y = self.z as i64;
            self.z = 0;
            y
        } else {
            self.z = (self.z + 1).min(params.y_max);
            -1
        }
    }
}

/// Samples `horizon` steps; returns the emitted `y` values and the counter
/// value in effect before each step.
pub fn seed_sample<R: Rng + ?Sized>(
    params: &SeedParams,
    horizon: usize,
    rng: &mut R,
) -> (Vec<i64>, Vec<usize>) {
    let mut state = SeedState::initial(params, rng);
    let mut ys = Vec::with_capacity(horizon);
    let mut zs = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        zs.push(state.z);
        ys.push(state.step(params, rng));
    }
    (ys, zs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinModel {
    pub params: SeedParams,
    /// `G(v)` for `v = -1..=y_max + 1`, stored at index `v + 1`.
    g: Vec<f64>,
    /// `W(y)` for `y = -1..=y_max`, stored at index `y + 1`.
    w: Vec<f64>,
}

pub fn build_win_model(params: SeedParams) -> Result<WinModel> {
    params.validate()?;
    let SeedParams { p, m, y_max } = params;
    let q = 1.0 - p;
    let mut g = Vec::with_capacity(y_max + 3);
    g.push(0.0);
    for v in 0..=y_max + 1 {
        // (1 - p) + p (1 - (1 - p)^v), written without cancellation.
        g.push(1.0 - p * q.powi(v as i32));
    }
    // (b^m - a^m) / (m (b - a)) expanded as a mean of monomials, which stays
    // accurate when b - a underflows relative to b.
    let w = (0..=y_max + 1)
        .map(|i| {
            let (a, b) = (g[i], g[i + 1]);
            let sum: f64 = (0..m)
                .map(|k| b.powi(k as i32) * a.powi((m - 1 - k) as i32))
                .sum();
            (sum / m as f64).clamp(0.0, 1.0)
        })
        .collect();
    Ok(WinModel { params, g, w })
}

impl WinModel {
    /// `G(v)`, saturated outside `-1..=y_max + 1`.
    pub fn g(&self, v: i64) -> f64 {
        let idx = (v.max(-1) + 1) as usize;
        self.g[idx.min(self.g.len() - 1)]
    }

    /// Capped win function `W(min(y, y_max))`.
    pub fn w(&self, y: i64) -> f64 {
        let idx = (y.max(-1) + 1) as usize;
        self.w[idx.min(self.w.len() - 1)]
    }

    pub fn g_table(&self) -> &[f64] {
        &self.g
    }

    pub fn w_table(&self) -> &[f64] {
        &self.w
    }
}

/// Finite discrete law with strictly increasing support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactDistribution {
    values: Vec<f64>,
    masses: Vec<f64>,
}

impl ExactDistribution {
    /// Builds a law from unsorted `(value, mass)` pairs. Zero masses are
    /// dropped; values within [`MERGE_TOLERANCE`] merge into the largest one.
    pub fn from_pairs(mut pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.iter().any(|&(v, q)| !v.is_finite() || !q.is_finite() || q < 0.0) {
            return Err(Error::Malformed("non-finite value or negative mass".into()));
        }
        pairs.retain(|&(_, q)| q > 0.0);
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut masses: Vec<f64> = Vec::with_capacity(pairs.len());
        for (v, q) in pairs {
            match values.last_mut() {
                Some(last) if v - *last <= MERGE_TOLERANCE => {
                    *last = v;
                    *masses.last_mut().unwrap() += q;
                }
                _ => {
                    values.push(v);
                    masses.push(q);
                }
            }
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Malformed(format!("masses sum to {total}")));
        }
        Ok(Self { values, masses })
    }

    pub fn point(value: f64) -> Self {
        Self { values: vec![value], masses: vec![1.0] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().copied().zip(self.masses.iter().copied())
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.atoms().map(|(v, q)| v * q).sum()
    }

    /// `E[(X - t)+]`.
    pub fn expected_excess(&self, t: f64) -> f64 {
        self.atoms().filter(|&(v, _)| v > t).map(|(v, q)| q * (v - t)).sum()
    }

    /// `Pr[X > t]`.
    pub fn prob_greater(&self, t: f64) -> f64 {
        self.atoms().filter(|&(v, _)| v > t).map(|(_, q)| q).sum()
    }

    /// Index of the atom closest to `value`, if within `tol`.
    pub fn find(&self, value: f64, tol: f64) -> Option<usize> {
        let idx = self.values.partition_point(|&v| v < value);
        let mut best: Option<(usize, f64)> = None;
        for i in [idx.wrapping_sub(1), idx] {
            if let Some(&v) = self.values.get(i) {
                let d = (v - value).abs();
                if d <= tol && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Exact law of `1 - prod_{l <= r} (1 - W(y_l))` for a stationary start.
///
/// Enumerates the initial counter and the `r` fire/silent choices. The
/// product is accumulated left to right, which is also the order used by the
/// online selector, so realized values coincide bitwise with support points.
pub fn enumerate_prefix(model: &WinModel, r: usize) -> Result<ExactDistribution> {
    let SeedParams { p, m, y_max } = model.params;
    if r == 0 || r >= m {
        return Err(Error::MultiplicityOutOfRange { r, max: m - 1 });
    }
    let init = model.params.initial_law();
    let mut pairs = Vec::with_capacity((y_max + 1) << r);
    for (z0, &mass0) in init.iter().enumerate() {
        for bits in 0u32..(1 << r) {
            let (mut z, mut mass, mut prod) = (z0, mass0, 1.0);
            for l in 0..r {
                let y = if bits >> l & 1 == 1 {
                    mass *= p;
                    let y = z as i64;
                    z = 0;
                    y
                } else {
                    mass *= 1.0 - p;
                    z = (z + 1).min(y_max);
                    -1
                };
                prod *= 1.0 - model.w(y);
            }
            pairs.push((1.0 - prod, mass));
        }
    }
    ExactDistribution::from_pairs(pairs)
}

/// Win probability for a run of explicit `y` values, with the same rounding
/// as [`enumerate_prefix`].
pub fn desired_win_probability(model: &WinModel, ys: &[i64]) -> f64 {
    1.0 - ys.iter().fold(1.0, |prod, &y| prod * (1.0 - model.w(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FTable {
    pub params: SeedParams,
    pub n_max: usize,
    pub head: Vec<f64>,
    pub tail_ratio: f64,
}

impl FTable {
    /// `F(n)` for `n <= n_max`, and the geometric upper bound beyond.
    pub fn value(&self, n: usize) -> f64 {
        if n <= self.n_max {
            self.head[n]
        } else {
            self.head[self.n_max] * self.tail_ratio.powi((n - self.n_max) as i32)
        }
    }
}

/// `F(n) = E[prod_{l <= n} (1 - W(y_l))]` by forward dynamic programming over
/// the saturating counter.
pub fn compute_f(model: &WinModel, n_max: usize) -> Result<FTable> {
    if n_max < 2 {
        return Err(Error::InvalidParameter("n_max must be at least 2".into()));
    }
    let SeedParams { p, y_max, .. } = model.params;
    let silent = (1.0 - p) * (1.0 - model.w(-1));
    let mut state = model.params.initial_law();
    let mut head = Vec::with_capacity(n_max + 1);
    head.push(state.iter().sum::<f64>());
    let mut next = vec![0.0; y_max + 1];
    for _ in 0..n_max {
        next.iter_mut().for_each(|x| *x = 0.0);
        for (z, &mass) in state.iter().enumerate() {
            next[0] += mass * p * (1.0 - model.w(z as i64));
            next[(z + 1).min(y_max)] += mass * silent;
        }
        std::mem::swap(&mut state, &mut next);
        head.push(state.iter().sum());
    }
    let tail_ratio = head[n_max] / head[n_max - 1];
    Ok(FTable { params: model.params, n_max, head, tail_ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallCertificate {
    pub r: usize,
    pub holds: bool,
    pub min_gap: f64,
    pub argmin: f64,
}

/// `g(t)` for the law `dist` of the desired win probability at multiplicity `r`.
pub fn small_gap(dist: &ExactDistribution, r: usize, m: usize, t: f64) -> f64 {
    let (rf, mf) = (r as f64, m as f64);
    let e = (mf - rf) / mf;
    1.0 - t - e * (1.0 - t.powf(mf / (mf - rf))) - dist.expected_excess(t)
}

/// Minimizes `g` over `[0, 1]`.
///
/// Between consecutive support points `g` is convex with derivative
/// `-1 + t^{r/(m-r)} + S`, where `S = Pr[w > t]` is constant there, so the
/// interior stationary point is `(1 - S)^{(m-r)/r}` in closed form.
pub fn check_small(model: &WinModel, r: usize) -> Result<SmallCertificate> {
    let dist = enumerate_prefix(model, r)?;
    Ok(check_small_dist(&dist, r, model.params.m))
}

pub fn check_small_dist(dist: &ExactDistribution, r: usize, m: usize) -> SmallCertificate {
    let mut knots = vec![0.0];
    knots.extend(dist.values().iter().copied().filter(|&v| v > 0.0 && v < 1.0));
    knots.push(1.0);
    let exponent = (m - r) as f64 / r as f64;
    let mut best = (f64::INFINITY, 0.0);
    for pair in knots.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let s = dist.prob_greater(0.5 * (a + b));
        let stationary = (1.0 - s).max(0.0).powf(exponent).clamp(a, b);
        for t in [a, stationary, b] {
            let gap = small_gap(dist, r, m, t);
            if gap < best.0 {
                best = (gap, t);
            }
        }
    }
    SmallCertificate { r, holds: best.0 >= -SMALL_TOLERANCE, min_gap: best.0, argmin: best.1 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_model() -> WinModel {
        build_win_model(SeedParams::new(0.48, 6, 30).unwrap()).unwrap()
    }

    #[test]
    fn rejects_degenerate_p() {
        assert!(SeedParams::new(0.0, 6, 30).is_err());
        assert!(SeedParams::new(1.0, 6, 30).is_err());
        assert!(SeedParams::new(0.5, 1, 30).is_err());
    }

    #[test]
    fn g_boundary_values() {
        let model = table_model();
        assert_eq!(model.g(-1), 0.0);
        assert!((model.g(0) - 0.52).abs() < 1e-15);
        assert!(model.g(31) <= 1.0);
        assert!(model.g_table().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn w_at_minus_one_matches_closed_form() {
        let model = table_model();
        assert!((model.w(-1) - 0.52f64.powi(5) / 6.0).abs() < 1e-15);
        assert!((model.w(-1) - 0.006337).abs() < 1e-6);
    }

    #[test]
    fn w_quotient_agrees_with_direct_formula_where_stable() {
        let model = table_model();
        for y in -1..10 {
            let (a, b) = (model.g(y), model.g(y + 1));
            let direct = (b.powi(6) - a.powi(6)) / (6.0 * (b - a));
            assert!((model.w(y) - direct).abs() < 1e-12, "y={y}");
        }
    }

    #[test]
    fn w_nondecreasing_and_capped() {
        let model = table_model();
        assert!(model.w_table().windows(2).all(|w| w[0] <= w[1]));
        assert!(model.w_table().iter().all(|&w| (0.0..=1.0).contains(&w)));
        assert_eq!(model.w(45), model.w(30));
    }

    // Independent estimate of W(-1): among six iid first-round y values with
    // ties broken uniformly at random, the chance that index 0 holds the
    // unique-or-tied maximum while y_0 = -1.
    #[test]
    fn w_minus_one_monte_carlo() {
        let params = SeedParams::new(0.48, 6, 30).unwrap();
        let model = build_win_model(params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut hits, mut cond) = (0u64, 0u64);
        for _ in 0..400_000 {
            let ys: Vec<i64> = (0..6).map(|_| seed_sample(&params, 1, &mut rng).0[0]).collect();
            if ys[0] != -1 {
                continue;
            }
            cond += 1;
            let top = *ys.iter().max().unwrap();
            let ties = ys.iter().filter(|&&y| y == top).count();
            if top == -1 && rng.random_range(0..ties) == 0 {
                hits += 1;
            }
        }
        let est = hits as f64 / cond as f64;
        let se = (est * (1.0 - est) / cond as f64).sqrt();
        assert!((est - model.w(-1)).abs() < 4.0 * se, "{est} vs {}", model.w(-1));
    }

    #[test]
    fn seed_silent_frequency() {
        let params = SeedParams::new(0.48, 6, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ys, _) = seed_sample(&params, 200_000, &mut rng);
        let freq = ys.iter().filter(|&&y| y == -1).count() as f64 / ys.len() as f64;
        assert!((freq - 0.52).abs() < 4.0 * (0.52f64 * 0.48 / 2e5).sqrt());
    }

    #[test]
    fn seed_counter_is_geometric_at_every_step() {
        let params = SeedParams::new(0.3, 4, 12).unwrap();
        let law = params.initial_law();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 40_000;
        for k in [0usize, 3, 9] {
            let mut counts = [0u64; 13];
            for _ in 0..trials {
                let (_, zs) = seed_sample(&params, k + 1, &mut rng);
                counts[zs[k]] += 1;
            }
            for (v, &c) in counts.iter().enumerate().take(5) {
                let est = c as f64 / trials as f64;
                let se = (law[v] * (1.0 - law[v]) / trials as f64).sqrt();
                assert!((est - law[v]).abs() < 4.5 * se, "k={k} v={v}");
            }
        }
    }

    #[test]
    fn near_one_p_fires_immediately() {
        let params = SeedParams::new(0.999_999, 6, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (ys, zs) = seed_sample(&params, 1, &mut rng);
        assert_eq!(ys[0], zs[0] as i64);
    }

    #[test]
    fn prefix_r1_support_and_mass() {
        let model = table_model();
        let dist = enumerate_prefix(&model, 1).unwrap();
        assert_eq!(dist.len(), 32);
        assert!((dist.total_mass() - 1.0).abs() < 1e-12);
        assert!((dist.masses()[0] - 0.52).abs() < 1e-12);
        assert!((dist.values()[0] - model.w(-1)).abs() < 1e-15);
        let deficit = 0.52f64.powi(30);
        assert!(dist.mean() <= 1.0 / 6.0 + 1e-15);
        assert!(1.0 / 6.0 - dist.mean() <= deficit);
    }

    #[test]
    fn prefix_rejects_bad_r() {
        let model = table_model();
        assert!(enumerate_prefix(&model, 0).is_err());
        assert!(enumerate_prefix(&model, 6).is_err());
    }

    #[test]
    fn prefix_support_sizes() {
        let model = table_model();
        let sizes: Vec<usize> = (1..=5).map(|r| enumerate_prefix(&model, r).unwrap().len()).collect();
        assert_eq!(sizes, vec![32, 63, 124, 214, 362]);
    }

    #[test]
    fn prefix_mean_matches_monte_carlo() {
        let params = SeedParams::new(0.48, 6, 30).unwrap();
        let model = build_win_model(params).unwrap();
        let dist = enumerate_prefix(&model, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| desired_win_probability(&model, &seed_sample(&params, 3, &mut rng).0))
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - dist.mean()).abs() < 4.0 * (var / n as f64).sqrt());
        assert!(samples.iter().all(|&s| dist.find(s, 1e-12).is_some()));
    }

    // Values frozen from an independent dense-matrix evaluation of the
    // counter chain.
    #[test]
    fn f_table_frozen_values() {
        let f = compute_f(&table_model(), 10).unwrap();
        let expected = [
            1.0,
            0.833333333333,
            0.677090292979,
            0.540234894015,
            0.425974294543,
            0.333332271966,
            0.259550107287,
            0.201443535298,
            0.156009910151,
            0.120651097246,
            0.093217524313,
        ];
        for (n, e) in expected.iter().enumerate() {
            assert!((f.head[n] - e).abs() < 1e-11, "F({n}) = {}", f.head[n]);
        }
        assert!((f.tail_ratio - 0.7726206096875846).abs() < 1e-12);
    }

    #[test]
    fn f_ratios_strictly_decrease() {
        let f = compute_f(&table_model(), 10).unwrap();
        let ratios: Vec<f64> = f.head.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.windows(2).all(|w| w[1] < w[0]));
        assert!(f.head.windows(2).all(|w| w[1] < w[0]));
        assert!(f.value(12) < f.value(11));
    }

    #[test]
    fn f_matches_monte_carlo() {
        let params = SeedParams::new(0.48, 6, 30).unwrap();
        let model = build_win_model(params).unwrap();
        let f = compute_f(&model, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut sums = [0.0f64; 7];
        let mut sq = [0.0f64; 7];
        for _ in 0..n {
            let (ys, _) = seed_sample(&params, 6, &mut rng);
            let mut prod = 1.0;
            for k in 0..=6 {
                if k > 0 {
                    prod *= 1.0 - model.w(ys[k - 1]);
                }
                sums[k] += prod;
                sq[k] += prod * prod;
            }
        }
        for k in 0..=6 {
            let mean = sums[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(1e-30);
            assert!((mean - f.head[k]).abs() <= 4.0 * (var / n as f64).sqrt() + 1e-12, "k={k}");
        }
    }

    #[test]
    fn small_gap_endpoints() {
        let model = table_model();
        for r in 1..6 {
            let dist = enumerate_prefix(&model, r).unwrap();
            assert!(small_gap(&dist, r, 6, 1.0).abs() < 1e-15);
            let g0 = small_gap(&dist, r, 6, 0.0);
            assert!((g0 - (r as f64 / 6.0 - dist.mean())).abs() < 1e-14);
            assert!(g0 >= 0.0);
        }
    }

    #[test]
    fn check_small_holds_at_table_p() {
        let model = table_model();
        for r in 1..6 {
            let cert = check_small(&model, r).unwrap();
            assert!(cert.holds, "r={r}: {cert:?}");
        }
    }

    #[test]
    fn check_small_minimum_beats_dense_grid() {
        let model = table_model();
        for r in 1..6 {
            let dist = enumerate_prefix(&model, r).unwrap();
            let cert = check_small_dist(&dist, r, 6);
            let grid_min = (0..=20_000)
                .map(|i| small_gap(&dist, r, 6, i as f64 / 20_000.0))
                .fold(f64::INFINITY, f64::min);
            assert!(cert.min_gap <= grid_min + 1e-15);
        }
    }

    #[test]
    fn find_tolerates_rounding_only() {
        let dist = ExactDistribution::from_pairs(vec![(0.2, 0.5), (0.7, 0.5)]).unwrap();
        assert_eq!(dist.find(0.2 + 1e-15, 1e-12), Some(0));
        assert_eq!(dist.find(0.45, 1e-12), None);
    }
}
