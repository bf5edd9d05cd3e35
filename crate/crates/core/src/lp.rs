//! Dense revised simplex for small equality-form linear programs
//! `min c'x, Ax = b, x >= 0`, started from a caller-supplied feasible basis.
//!
//! Columns may be appended between solves, which is what column generation
//! needs. Dantzig pricing is used until a run of degenerate pivots, after
//! which Bland's rule takes over to rule out cycling.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-11;
const REFACTOR_EVERY: usize = 64;
const DEGENERATE_RUN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct RevisedSimplex {
    rows: usize,
    columns: Vec<Vec<f64>>,
    cost: Vec<f64>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    /// Row-major inverse of the basis matrix.
    binv: Vec<f64>,
    xb: Vec<f64>,
    since_refactor: usize,
}

impl RevisedSimplex {
    pub fn new(rhs: Vec<f64>, columns: Vec<Vec<f64>>, cost: Vec<f64>, basis: Vec<usize>) -> Result<Self> {
        let rows = rhs.len();
        if columns.len() != cost.len() || basis.len() != rows {
            return Err(Error::Malformed("inconsistent LP dimensions".into()));
        }
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::Malformed("column length differs from row count".into()));
        }
        let mut in_basis = vec![false; columns.len()];
        for &j in &basis {
            in_basis[j] = true;
        }
        let mut lp = Self {
            rows,
            columns,
            cost,
            rhs,
            basis,
            in_basis,
            binv: vec![0.0; rows * rows],
            xb: vec![0.0; rows],
            since_refactor: 0,
        };
        lp.refactor()?;
        if lp.xb.iter().any(|&x| x < -1e-9) {
            return Err(Error::Malformed("initial basis is infeasible".into()));
        }
        Ok(lp)
    }

    pub fn add_column(&mut self, column: Vec<f64>, cost: f64) -> usize {
        debug_assert_eq!(column.len(), self.rows);
        self.columns.push(column);
        self.cost.push(cost);
        self.in_basis.push(false);
        self.columns.len() - 1
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// Recomputes the basis inverse by Gauss-Jordan elimination with partial
    /// pivoting, then the basic solution.
    fn refactor(&mut self) -> Result<()> {
        let n = self.rows;
        let mut a = vec![0.0; n * n];
        for (col, &j) in self.basis.iter().enumerate() {
            for i in 0..n {
                a[i * n + col] = self.columns[j][i];
            }
        }
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            inv[i * n + i] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
                .unwrap();
            if a[piv * n + col].abs() < 1e-14 {
                return Err(Error::Malformed("singular basis".into()));
            }
            if piv != col {
                for k in 0..n {
                    a.swap(piv * n + k, col * n + k);
                    inv.swap(piv * n + k, col * n + k);
                }
            }
            let d = a[col * n + col];
            for k in 0..n {
                a[col * n + k] /= d;
                inv[col * n + k] /= d;
            }
            for i in 0..n {
                if i != col {
                    let factor = a[i * n + col];
                    if factor != 0.0 {
                        for k in 0..n {
                            a[i * n + k] -= factor * a[col * n + k];
                            inv[i * n + k] -= factor * inv[col * n + k];
                        }
                    }
                }
            }
        }
        self.binv = inv;
        self.xb = self.apply_binv(&self.rhs);
        self.since_refactor = 0;
        Ok(())
    }

    fn apply_binv(&self, v: &[f64]) -> Vec<f64> {
        let n = self.rows;
        (0..n)
            .map(|i| self.binv[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Simplex multipliers `y' = c_B' B^{-1}`.
    pub fn duals(&self) -> Vec<f64> {
        let n = self.rows;
        let mut y = vec![0.0; n];
        for (i, &j) in self.basis.iter().enumerate() {
            let cb = self.cost[j];
            if cb != 0.0 {
                for (k, yk) in y.iter_mut().enumerate() {
                    *yk += cb * self.binv[i * n + k];
                }
            }
        }
        y
    }

    pub fn reduced_cost(&self, j: usize, y: &[f64]) -> f64 {
        self.cost[j] - self.columns[j].iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn primal(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.columns.len()];
        for (i, &j) in self.basis.iter().enumerate() {
            x[j] = self.xb[i].max(0.0);
        }
        x
    }

    pub fn objective(&self) -> f64 {
        self.basis.iter().zip(&self.xb).map(|(&j, &x)| self.cost[j] * x).sum()
    }

    pub fn solve(&mut self, max_pivots: usize) -> Result<Status> {
        let mut degenerate = 0usize;
        for _ in 0..max_pivots {
            let y = self.duals();
            let bland = degenerate >= DEGENERATE_RUN;
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..self.columns.len() {
                if self.in_basis[j] {
                    continue;
                }
                let d = self.reduced_cost(j, &y);
                if d < -PIVOT_TOL {
                    if bland {
                        entering = Some((j, d));
                        break;
                    }
                    if entering.is_none_or(|(_, best)| d < best) {
                        entering = Some((j, d));
                    }
                }
            }
            let Some((q, _)) = entering else {
                return Ok(Status::Optimal);
            };
            let dir = self.apply_binv(&self.columns[q]);
            let mut leave: Option<(usize, f64)> = None;
            for (i, &d) in dir.iter().enumerate() {
                if d > PIVOT_TOL {
                    let ratio = self.xb[i].max(0.0) / d;
                    let better = match leave {
                        None => true,
                        Some((l, best)) => {
                            if ratio < best - 1e-15 {
                                true
                            } else if ratio <= best + 1e-15 {
                                if bland { self.basis[i] < self.basis[l] } else { d > dir[l] }
                            } else {
                                false
                            }
                        }
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((r, step)) = leave else {
                return Ok(Status::Unbounded);
            };
            degenerate = if step <= 1e-15 { degenerate + 1 } else { 0 };
            self.pivot(r, q, &dir, step)?;
        }
        Err(Error::Bisection(format!("simplex exceeded {max_pivots} pivots")))
    }

    #[allow(clippy::needless_range_loop)]
    fn pivot(&mut self, r: usize, q: usize, dir: &[f64], step: f64) -> Result<()> {
        let n = self.rows;
        for (i, x) in self.xb.iter_mut().enumerate() {
            if i != r {
                *x -= step * dir[i];
            }
        }
        self.xb[r] = step;
        let pr = dir[r];
        for k in 0..n {
            self.binv[r * n + k] /= pr;
        }
        for i in 0..n {
            if i != r && dir[i] != 0.0 {
                let factor = dir[i];
                for k in 0..n {
                    self.binv[i * n + k] -= factor * self.binv[r * n + k];
                }
            }
        }
        self.in_basis[self.basis[r]] = false;
        self.in_basis[q] = true;
        self.basis[r] = q;
        self.since_refactor += 1;
        if self.since_refactor >= REFACTOR_EVERY {
            self.refactor()?;
        }
        Ok(())
    }
}
