//! Monotone couplings between the law of a desired win probability `a` and the
//! tournament variable `b = u^{(m-r)/r}`, `u ~ Uniform(0, 1)`, such that
//! `E[b | a] >= a` for every atom.
//!
//! Both laws live on the quantile axis `[0, 1]`: atom `i` of the source owns
//! the interval `I_i` of length `q_i`. A partition of the axis into blocks
//! defines a coupling in which, conditional on a point `v` of `I_i`, `u` is
//! uniform on the block containing `v`. Every such coupling is stochastically
//! monotone and leaves `u` exactly uniform. Mixtures of block partitions keep
//! both properties, and the cheapest feasible mixture is found by column
//! generation: the master LP minimizes total violation of the mean
//! constraints, and the pricing step is a longest-path recursion over the
//! cell grid.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lp::{RevisedSimplex, Status};
use crate::quadrature::gauss_legendre;
use crate::win_distribution::ExactDistribution;

/// Tolerance on `E[b | a_i] >= a_i` accepted for a finished coupling.
pub const FEASIBILITY_TOL: f64 = 1e-9;
pub const DEFAULT_CELLS: usize = 512;
pub const MAX_CELLS: usize = 8192;
const MAX_GENERATIONS: usize = 200;
pub const MIN_ROW_MASS: f64 = 1e-13;

#[derive(Debug, Clone, Serialize)]
pub struct TournamentCoupling {
    pub r: usize,
    pub m: usize,
    pub source: ExactDistribution,
    /// Plan row serving each source atom. Atoms lighter than
    /// [`MIN_ROW_MASS`] share the row of the next heavier-valued atom.
    pub row_of: Vec<usize>,
    /// Target mean `a` of each row (the largest value it serves).
    pub row_values: Vec<f64>,
    pub row_masses: Vec<f64>,
    /// Cell boundaries on the quantile axis of `u`; the uniform grid `k/N`
    /// refined at the source's cumulative masses.
    pub grid: Vec<f64>,
    /// `E[b]` over each cell.
    pub cell_means: Vec<f64>,
    /// Sparse plan rows: `(cell, mass)` pairs.
    pub plan: Vec<Vec<(usize, f64)>>,
    /// `E[b | row]` under the plan.
    pub conditional_means: Vec<f64>,
    /// Mixture weights and cut sets of the partitions in use.
    pub partitions: Vec<(f64, Vec<usize>)>,
    pub cells_requested: usize,
}

/// Exponent `e` of `b = u^e`.
fn exponent(r: usize, m: usize) -> f64 {
    (m - r) as f64 / r as f64
}

struct Geometry {
    grid: Vec<f64>,
    len: Vec<f64>,
    cell_mean: Vec<f64>,
    /// Owning atom of each cell.
    owner: Vec<usize>,
    /// First cell of each atom, plus a sentinel.
    #[allow(dead_code)]
    atom_start: Vec<usize>,
    /// Length of each atom's interval in grid arithmetic.
    atom_len: Vec<f64>,
}

impl Geometry {
    fn new(masses: &[f64], e: f64, cells: usize) -> Self {
        let total: f64 = masses.iter().sum();
        let mut bounds = Vec::with_capacity(masses.len() + 1);
        let mut acc = 0.0;
        bounds.push(0.0);
        for &q in &masses[..masses.len() - 1] {
            acc += q / total;
            bounds.push(acc.min(1.0));
        }
        bounds.push(1.0);

        // Uniform points closer than 1e-15 to an atom boundary are dropped.
        let mut points: Vec<(f64, bool)> = bounds.iter().map(|&u| (u, true)).collect();
        points.extend((1..cells).map(|k| (k as f64 / cells as f64, false)));
        points.sort_by(|x, y| x.0.total_cmp(&y.0).then(y.1.cmp(&x.1)));
        let mut grid: Vec<f64> = Vec::with_capacity(points.len());
        let mut is_bound: Vec<bool> = Vec::with_capacity(points.len());
        let mut atom_start = Vec::with_capacity(bounds.len());
        for (u, bound) in points {
            let close = grid.last().is_some_and(|&l| u - l <= 1e-15);
            if bound {
                if close && !is_bound.last().copied().unwrap_or(true) {
                    grid.pop();
                    is_bound.pop();
                }
                atom_start.push(grid.len());
                grid.push(u);
                is_bound.push(true);
            } else if !close {
                grid.push(u);
                is_bound.push(false);
            }
        }
        let n = grid.len() - 1;
        let len: Vec<f64> = grid.windows(2).map(|w| w[1] - w[0]).collect();
        let cell_mean = (0..n).map(|j| block_mean(grid[j], grid[j + 1], e)).collect();
        let mut owner = vec![0usize; n];
        for i in 0..masses.len() {
            for o in owner.iter_mut().take(atom_start[i + 1]).skip(atom_start[i]) {
                *o = i;
            }
        }
        let atom_len = (0..masses.len())
            .map(|i| len[atom_start[i]..atom_start[i + 1]].iter().sum())
            .collect();
        Self { grid, len, cell_mean, owner, atom_start, atom_len }
    }

    fn cells(&self) -> usize {
        self.len.len()
    }

    /// Conditional means `E[b | a_i]` under the block partition with the given
    /// cut points (grid indices, starting at 0 and ending at the last point).
    fn column(&self, cuts: &[usize]) -> Vec<f64> {
        let atoms = self.atom_len.len();
        let mut out = vec![0.0; atoms];
        for w in cuts.windows(2) {
            let (s, t) = (w[0], w[1]);
            let width: f64 = self.len[s..t].iter().sum();
            let mass: f64 = (s..t).map(|j| self.len[j] * self.cell_mean[j]).sum();
            let avg = mass / width;
            for j in s..t {
                out[self.owner[j]] += self.len[j] * avg;
            }
        }
        for (o, l) in out.iter_mut().zip(&self.atom_len) {
            *o /= l;
        }
        out
    }

    /// Partition maximizing `sum_i y_i E[b | a_i]`.
    fn price(&self, y: &[f64]) -> (f64, Vec<usize>) {
        let n = self.cells();
        let mut cum_y = vec![0.0; n + 1];
        let mut cum_m = vec![0.0; n + 1];
        for j in 0..n {
            let i = self.owner[j];
            cum_y[j + 1] = cum_y[j] + y[i] * self.len[j] / self.atom_len[i];
            cum_m[j + 1] = cum_m[j] + self.len[j] * self.cell_mean[j];
        }
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut from = vec![0usize; n + 1];
        best[0] = 0.0;
        for t in 1..=n {
            for s in 0..t {
                let width = self.grid[t] - self.grid[s];
                let avg = if t == s + 1 { self.cell_mean[s] } else { (cum_m[t] - cum_m[s]) / width };
                let v = best[s] + avg * (cum_y[t] - cum_y[s]);
                if v > best[t] {
                    best[t] = v;
                    from[t] = s;
                }
            }
        }
        let mut cuts = vec![n];
        let mut t = n;
        while t > 0 {
            t = from[t];
            cuts.push(t);
        }
        cuts.reverse();
        (best[n], cuts)
    }
}

/// `E[u^e]` for `u` uniform on `[lo, hi]`.
fn block_mean(lo: f64, hi: f64, e: f64) -> f64 {
    let width = hi - lo;
    if lo == 0.0 {
        return hi.powf(e) / (e + 1.0);
    }
    if width > 1e-3 * hi {
        (hi.powf(e + 1.0) - lo.powf(e + 1.0)) / ((e + 1.0) * width)
    } else {
        gauss_legendre(&|u: f64| u.powf(e), lo, hi) / width
    }
}

/// Folds atoms lighter than [`MIN_ROW_MASS`] into the next row up, which
/// only strengthens their mean constraint.
fn merge_light_atoms(source: &ExactDistribution) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut row_of = Vec::with_capacity(source.len());
    let (mut values, mut masses) = (Vec::new(), Vec::new());
    let mut pending = 0.0;
    let mut waiting = Vec::new();
    for (i, (v, q)) in source.atoms().enumerate() {
        pending += q;
        waiting.push(i);
        if pending >= MIN_ROW_MASS {
            row_of.resize(i + 1, values.len());
            values.push(v);
            masses.push(pending);
            pending = 0.0;
            waiting.clear();
        }
    }
    if !waiting.is_empty() {
        if values.is_empty() {
            values.push(source.values()[source.len() - 1]);
            masses.push(pending);
        } else {
            *values.last_mut().unwrap() = source.values()[source.len() - 1];
            *masses.last_mut().unwrap() += pending;
        }
        row_of.resize(source.len(), values.len() - 1);
    }
    (row_of, values, masses)
}

pub fn build_coupling(source: &ExactDistribution, r: usize, m: usize, cells: usize) -> Result<TournamentCoupling> {
    if r == 0 || r >= m {
        return Err(Error::MultiplicityOutOfRange { r, max: m - 1 });
    }
    let mut n = cells.max(1);
    let mut last_residual = f64::INFINITY;
    while n <= MAX_CELLS {
        match solve_at(source, r, m, n)? {
            Ok(coupling) => return Ok(coupling),
            Err(residual) => last_residual = residual,
        }
        n *= 2;
    }
    Err(Error::CouplingInfeasible { r, cells: n / 2, residual: last_residual })
}

/// Inner result is `Err(residual)` when the grid is too coarse.
fn solve_at(
    source: &ExactDistribution,
    r: usize,
    m: usize,
    cells: usize,
) -> Result<std::result::Result<TournamentCoupling, f64>> {
    let e = exponent(r, m);
    let (row_of, row_values, row_masses) = merge_light_atoms(source);
    let geo = Geometry::new(&row_masses, e, cells);
    let atoms = row_values.len();
    let targets = &row_values[..];
    let rows = atoms + 1;

    // Columns: slack s_i (cost 1), surplus e_i (cost 0), then partitions.
    let mut columns = Vec::with_capacity(2 * atoms + 8);
    let mut cost = Vec::with_capacity(2 * atoms + 8);
    for sign in [1.0, -1.0] {
        for i in 0..atoms {
            let mut col = vec![0.0; rows];
            col[i] = sign;
            columns.push(col);
            cost.push(if sign > 0.0 { 1.0 } else { 0.0 });
        }
    }
    let finest: Vec<usize> = (0..=geo.cells()).collect();
    let coarsest = vec![0, geo.cells()];
    let mut partitions = vec![finest, coarsest];
    let mut means: Vec<Vec<f64>> = partitions.iter().map(|p| geo.column(p)).collect();
    for mean in &means {
        let mut col = mean.clone();
        col.push(1.0);
        columns.push(col);
        cost.push(0.0);
    }
    let first_partition = 2 * atoms;
    let mut basis: Vec<usize> = (0..atoms)
        .map(|i| if targets[i] >= means[0][i] { i } else { atoms + i })
        .collect();
    basis.push(first_partition);
    let mut rhs = targets.to_vec();
    rhs.push(1.0);
    let mut lp = RevisedSimplex::new(rhs, columns, cost, basis)?;

    for _ in 0..MAX_GENERATIONS {
        if lp.solve(50_000)? != Status::Optimal {
            return Err(Error::Malformed("coupling master LP unbounded".into()));
        }
        if lp.objective() <= 1e-13 {
            break;
        }
        let y = lp.duals();
        let (value, cuts) = geo.price(&y[..atoms]);
        if value + y[atoms] <= 1e-13 {
            break;
        }
        let mean = geo.column(&cuts);
        let mut col = mean.clone();
        col.push(1.0);
        lp.add_column(col, 0.0);
        partitions.push(cuts);
        means.push(mean);
    }

    let x = lp.primal();
    let mut weights: Vec<(f64, usize)> = (0..partitions.len())
        .map(|k| (x[first_partition + k], k))
        .filter(|&(w, _)| w > 0.0)
        .collect();
    let total: f64 = weights.iter().map(|w| w.0).sum();
    weights.iter_mut().for_each(|w| w.0 /= total);

    let conditional: Vec<f64> = (0..atoms)
        .map(|i| weights.iter().map(|&(w, k)| w * means[k][i]).sum())
        .collect();
    let residual = conditional
        .iter()
        .zip(targets)
        .map(|(c, a)| c - a)
        .fold(f64::INFINITY, f64::min);
    if residual < -FEASIBILITY_TOL {
        return Ok(Err(residual));
    }

    let plan = build_plan(&geo, &partitions, &weights);
    Ok(Ok(TournamentCoupling {
        r,
        m,
        source: source.clone(),
        row_of,
        row_values,
        row_masses,
        grid: geo.grid,
        cell_means: geo.cell_mean,
        plan,
        conditional_means: conditional,
        partitions: weights.iter().map(|&(w, k)| (w, partitions[k].clone())).collect(),
        cells_requested: cells,
    }))
}

fn build_plan(geo: &Geometry, partitions: &[Vec<usize>], weights: &[(f64, usize)]) -> Vec<Vec<(usize, f64)>> {
    let atoms = geo.atom_len.len();
    let mut plan: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); atoms];
    for &(w, k) in weights {
        for cut in partitions[k].windows(2) {
            let (s, t) = (cut[0], cut[1]);
            let width: f64 = geo.len[s..t].iter().sum();
            // Mass of atom i inside the block, spread over the block's cells.
            let mut inside = vec![0.0; atoms];
            for j in s..t {
                inside[geo.owner[j]] += geo.len[j];
            }
            for (i, &mass) in inside.iter().enumerate() {
                if mass > 0.0 {
                    for j in s..t {
                        *plan[i].entry(j).or_insert(0.0) += w * mass * geo.len[j] / width;
                    }
                }
            }
        }
    }
    plan.into_iter().map(|row| row.into_iter().collect()).collect()
}

impl TournamentCoupling {
    pub fn exponent(&self) -> f64 {
        exponent(self.r, self.m)
    }

    pub fn cells(&self) -> usize {
        self.cell_means.len()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.iter().map(|row| row.iter().map(|e| e.1).sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cells()];
        for row in &self.plan {
            for &(j, v) in row {
                out[j] += v;
            }
        }
        out
    }

    /// Largest violation of pointwise CDF dominance between consecutive rows.
    pub fn monotonicity_violation(&self) -> f64 {
        let mut worst = 0.0f64;
        let rows = self.row_sums();
        for i in 1..self.plan.len() {
            let cdf = |k: usize| {
                let mut acc = vec![0.0; self.cells()];
                let mut run = 0.0;
                let mut it = self.plan[k].iter().peekable();
                for (j, slot) in acc.iter_mut().enumerate() {
                    while let Some(&&(c, v)) = it.peek() {
                        if c == j {
                            run += v;
                            it.next();
                        } else {
                            break;
                        }
                    }
                    *slot = run / rows[k];
                }
                acc
            };
            let (lo, hi) = (cdf(i - 1), cdf(i));
            for (a, b) in lo.iter().zip(&hi) {
                worst = worst.max(b - a);
            }
        }
        worst
    }

    /// Quantile position `u` of the tournament variable given source atom `i`.
    pub fn sample_u<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> f64 {
        let row = &self.plan[self.row_of[i]];
        let total: f64 = row.iter().map(|e| e.1).sum();
        let mut target = rng.random::<f64>() * total;
        let mut cell = row.last().map(|e| e.0).unwrap_or(0);
        for &(j, v) in row {
            if target < v {
                cell = j;
                break;
            }
            target -= v;
        }
        let (lo, hi) = (self.grid[cell], self.grid[cell + 1]);
        lo + rng.random::<f64>() * (hi - lo)
    }

    /// Strength for desired win probability `w`: `b^{1/(m-r)} = u^{1/r}`.
    pub fn strength<R: Rng + ?Sized>(&self, w: f64, rng: &mut R) -> Result<f64> {
        let i = self.source.find(w, 1e-12).ok_or(Error::UnknownWinProbability(w))?;
        Ok(self.sample_u(i, rng).powf(1.0 / self.r as f64))
    }

    /// Maximum absolute row-sum and column-sum errors against the source
    /// masses and the cell widths.
    pub fn marginal_errors(&self) -> (f64, f64) {
        let total: f64 = self.row_masses.iter().sum();
        let row = self
            .row_sums()
            .iter()
            .zip(&self.row_masses)
            .map(|(a, q)| (a - q / total).abs())
            .fold(0.0, f64::max);
        let col = self
            .column_sums()
            .iter()
            .zip(self.grid.windows(2))
            .map(|(a, w)| (a - (w[1] - w[0])).abs())
            .fold(0.0, f64::max);
        (row, col)
    }

    /// Smallest `E[b | a_i] - a_i` over source atoms.
    pub fn min_slack(&self) -> f64 {
        self.source
            .values()
            .iter()
            .zip(&self.row_of)
            .map(|(a, &k)| (self.conditional_means[k], a))
            .map(|(c, a)| c - a)
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::win_distribution::{build_win_model, enumerate_prefix, SeedParams};

    fn table_source(r: usize) -> ExactDistribution {
        let model = build_win_model(SeedParams::new(0.48, 6, 30).unwrap()).unwrap();
        enumerate_prefix(&model, r).unwrap()
    }

    fn assert_valid(c: &TournamentCoupling) {
        let (row, col) = c.marginal_errors();
        assert!(row < 1e-12, "row error {row}");
        assert!(col < 1e-12, "column error {col}");
        assert!(c.min_slack() >= -FEASIBILITY_TOL, "slack {}", c.min_slack());
        assert!(c.monotonicity_violation() < 1e-12);
    }

    #[test]
    fn point_mass_at_zero() {
        let c = build_coupling(&ExactDistribution::point(0.0), 2, 6, 16).unwrap();
        assert_valid(&c);
    }

    // A source equal to the discretized target: the identity plan is feasible.
    #[test]
    fn target_against_itself() {
        let n = 32;
        let pairs = (0..n)
            .map(|k| (block_mean(k as f64 / n as f64, (k + 1) as f64 / n as f64, 2.0), 1.0 / n as f64))
            .collect();
        let c = build_coupling(&ExactDistribution::from_pairs(pairs).unwrap(), 2, 6, n).unwrap();
        assert_valid(&c);
    }

    #[test]
    fn table_couplings_are_feasible() {
        for r in 1..6 {
            let c = build_coupling(&table_source(r), r, 6, DEFAULT_CELLS).unwrap();
            assert_valid(&c);
        }
    }

    #[test]
    fn infeasible_source_is_reported() {
        // Mean 0.9 exceeds E[b] = 1/3 for r = 2, m = 6.
        let src = ExactDistribution::point(0.9);
        assert!(matches!(build_coupling(&src, 2, 6, 8), Err(Error::CouplingInfeasible { .. })));
    }

    #[test]
    fn block_mean_matches_closed_form() {
        for e in [0.2, 0.5, 1.0, 2.0, 5.0] {
            let (lo, hi): (f64, f64) = (0.3, 0.3 + 1e-7);
            let exact = (hi.powf(e + 1.0) - lo.powf(e + 1.0)) / ((e + 1.0) * (hi - lo));
            assert!((block_mean(lo, hi, e) - exact).abs() < 1e-8);
            assert!((block_mean(0.0, 0.5, e) - 0.5f64.powf(e) / (e + 1.0)).abs() < 1e-15);
        }
    }
}
