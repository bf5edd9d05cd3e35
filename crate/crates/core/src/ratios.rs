//! Competitive-ratio calculus: the discrete never-win function `F`, its
//! Poisson mixture `f`, the dual function `a`, and the side conditions under
//! which a ratio `Gamma` is certified.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::quadrature::{exp_weighted_integral, gauss_legendre};
use crate::win_distribution::FTable;

const QUAD_TOL: f64 = 1e-13;
const CHECK_TOL: f64 = 1e-12;

/// `F(k)` given explicitly for `k <= k*` and as `F(k*) (1 - c)^{k - k*}` beyond.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteF {
    head: Vec<f64>,
    c: f64,
    m: usize,
}

impl DiscreteF {
    pub fn new(head: Vec<f64>, c: f64, m: usize) -> Result<Self> {
        if head.is_empty() || (head[0] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter("F(0) must equal 1".into()));
        }
        if head.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidParameter("F values must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidParameter(format!("tail rate c = {c} outside [0, 1]")));
        }
        if m < 2 {
            return Err(Error::InvalidParameter("m must be at least 2".into()));
        }
        Ok(Self { head, c, m })
    }

    /// `k* = n_max` and `1 - c` equal to the table's last ratio.
    pub fn from_table(table: &FTable) -> Self {
        Self { head: table.head.clone(), c: 1.0 - table.tail_ratio, m: table.params.m }
    }

    /// `F(k) = (1 - 1/m)^k`: the selector that ignores history.
    pub fn trivial(m: usize) -> Self {
        Self { head: vec![1.0], c: 1.0 / m as f64, m }
    }

    /// Two-way selector losing with probability `2^{-k} (1 - gamma)^{(k - 1)+}`.
    pub fn fahrbach(gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidParameter(format!("gamma = {gamma} outside [0, 1]")));
        }
        Ok(Self { head: vec![1.0, 0.5], c: 0.5 * (1.0 + gamma), m: 2 })
    }

    pub fn k_star(&self) -> usize {
        self.head.len() - 1
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn value(&self, k: usize) -> f64 {
        let ks = self.k_star();
        if k <= ks {
            self.head[k]
        } else {
            self.head[ks] * (1.0 - self.c).powi((k - ks) as i32)
        }
    }

    /// Forward difference `Delta^order F(k)`.
    pub fn delta(&self, order: usize, k: usize) -> f64 {
        if k >= self.k_star() {
            return (-self.c).powi(order as i32) * self.value(k);
        }
        let mut binom = 1.0;
        let mut sum = 0.0;
        for i in 0..=order {
            let sign = if (order - i).is_multiple_of(2) { 1.0 } else { -1.0 };
            sum += sign * binom * self.value(k + i);
            binom = binom * (order - i) as f64 / (i + 1) as f64;
        }
        sum
    }

    /// `E[F(Poi(lambda))]` restricted to `k >= k*`, in closed form.
    fn tail_mixture(&self, lambda: f64) -> f64 {
        let ks = self.k_star();
        let f_ks = self.head[ks];
        let rho = 1.0 - self.c;
        if lambda == 0.0 {
            return if ks == 0 { f_ks } else { 0.0 };
        }
        if rho == 0.0 {
            return f_ks * poisson_pmf(lambda, ks);
        }
        let mu = lambda * rho;
        // sum_{j >= 0} pmf(lambda, k* + j) rho^j
        //   = e^{-lambda c} rho^{-k*} Pr[Poi(lambda rho) >= k*]
        let upper = poisson_upper_tail(mu, ks);
        f_ks * (-lambda * self.c - ks as f64 * rho.ln()).exp() * upper
    }

    /// `sum_{k < k*} pmf(lambda, k) g(k)`.
    fn head_mixture(&self, lambda: f64, g: impl Fn(usize) -> f64) -> f64 {
        (0..self.k_star()).map(|k| poisson_pmf(lambda, k) * g(k)).sum()
    }
}

pub fn poisson_pmf(lambda: f64, k: usize) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (-lambda + k as f64 * lambda.ln() - ln_gamma(k as f64 + 1.0)).exp()
}

/// `Pr[Poi(mu) >= k]`, summed from the side that avoids cancellation.
pub fn poisson_upper_tail(mu: f64, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if mu > k as f64 {
        let lower: f64 = (0..k).map(|j| poisson_pmf(mu, j)).sum();
        return (1.0 - lower).max(0.0);
    }
    let mut term = poisson_pmf(mu, k);
    let mut sum = 0.0;
    let mut j = k;
    while term > 1e-18 * sum || sum == 0.0 {
        sum += term;
        j += 1;
        term *= mu / j as f64;
        if term == 0.0 {
            break;
        }
    }
    sum
}

/// `f(x) = E[F(Poi(m x))]`.
pub fn f_from_f(f: &DiscreteF, x: f64) -> f64 {
    let lambda = f.m as f64 * x.max(0.0);
    f.head_mixture(lambda, |k| f.head[k]) + f.tail_mixture(lambda)
}

/// `f^(order)(x) = m^order E[Delta^order F(Poi(m x))]`.
pub fn f_derivative(f: &DiscreteF, x: f64, order: usize) -> f64 {
    let m = f.m as f64;
    let lambda = m * x.max(0.0);
    let head = f.head_mixture(lambda, |k| f.delta(order, k));
    let tail = (-f.c).powi(order as i32) * f.tail_mixture(lambda);
    m.powi(order as i32) * (head + tail)
}

/// `1 - sum_{n<k*} m^n/(m+1)^{n+1} F(n) - (m/(m+1))^{k*} F(k*)/(1 + m c)`.
pub fn gamma_discrete(f: &DiscreteF) -> f64 {
    let m = f.m as f64;
    let ratio = m / (m + 1.0);
    let head: f64 = (0..f.k_star())
        .map(|n| ratio.powi(n as i32) / (m + 1.0) * f.head[n])
        .sum();
    1.0 - head - ratio.powi(f.k_star() as i32) * f.head[f.k_star()] / (1.0 + m * f.c)
}

/// `(3 + 2 gamma)/(6 + 3 gamma)`.
pub fn gamma_fahrbach(gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!("gamma = {gamma} outside [0, 1]")));
    }
    Ok((3.0 + 2.0 * gamma) / (6.0 + 3.0 * gamma))
}

/// `1 - int_0^inf e^{-t} f(t) dt`.
pub fn gamma_continuous<F: Fn(f64) -> f64>(f: &F) -> Result<f64> {
    Ok(1.0 - exp_weighted_integral(f, QUAD_TOL)?)
}

/// `a(x) = f(x) - int_0^inf e^{-t} f(t + x) dt`.
pub fn a_function<F: Fn(f64) -> f64>(f: &F, x: f64) -> Result<f64> {
    Ok(f(x) - exp_weighted_integral(&|t| f(t + x), QUAD_TOL)?)
}

/// Tabulated `f`, `f'` and `a` for a [`DiscreteF`], for the many evaluations
/// made by the matching algorithm.
///
/// `J(x) = int_x^inf e^{-s} f(s) ds` is accumulated panel by panel with
/// Gauss-Legendre, giving `a(x) = f(x) - e^x J(x)` and `Gamma = 1 - J(0)`.
/// Off-node values come from cubic Hermite interpolation using `a' = f' + a`.
#[derive(Debug, Clone)]
pub struct DualCurves {
    f: DiscreteF,
    gamma: f64,
    step: f64,
    f_node: Vec<f64>,
    df_node: Vec<f64>,
    j_node: Vec<f64>,
    a_node: Vec<f64>,
}

impl DualCurves {
    pub const STEP: f64 = 1.0 / 1024.0;
    pub const X_MAX: f64 = 32.0;

    pub fn new(f: &DiscreteF) -> Self {
        let step = Self::STEP;
        let nodes = (Self::X_MAX / step).round() as usize;
        let fx = |x: f64| f_from_f(f, x);
        let integrand = |s: f64| (-s).exp() * fx(s);
        let mut j_tail = 0.0;
        let mut s = Self::X_MAX;
        while (-s).exp() > 1e-30 {
            j_tail += gauss_legendre(&integrand, s, s + 1.0);
            s += 1.0;
        }
        let mut j_node = vec![0.0; nodes + 1];
        j_node[nodes] = j_tail;
        for k in (0..nodes).rev() {
            let (lo, hi) = (k as f64 * step, (k + 1) as f64 * step);
            j_node[k] = j_node[k + 1] + gauss_legendre(&integrand, lo, hi);
        }
        let f_node: Vec<f64> = (0..=nodes).map(|k| fx(k as f64 * step)).collect();
        let df_node: Vec<f64> = (0..=nodes).map(|k| f_derivative(f, k as f64 * step, 1)).collect();
        let a_node: Vec<f64> = (0..=nodes)
            .map(|k| f_node[k] - (k as f64 * step).exp() * j_node[k])
            .collect();
        let gamma = 1.0 - j_node[0];
        Self { f: f.clone(), gamma, step, f_node, df_node, j_node, a_node }
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn discrete(&self) -> &DiscreteF {
        &self.f
    }

    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let pos = x / self.step;
        let k = pos.floor() as usize;
        (k + 1 < self.f_node.len()).then_some((k, pos - k as f64))
    }

    pub fn f(&self, x: f64) -> f64 {
        match self.locate(x) {
            Some((k, u)) => hermite(
                self.f_node[k],
                self.df_node[k],
                self.f_node[k + 1],
                self.df_node[k + 1],
                self.step,
                u,
            ),
            None => f_from_f(&self.f, x),
        }
    }

    pub fn f_prime(&self, x: f64) -> f64 {
        f_derivative(&self.f, x, 1)
    }

    pub fn a(&self, x: f64) -> f64 {
        match self.locate(x) {
            Some((k, u)) => {
                let da0 = self.df_node[k] + self.a_node[k];
                let da1 = self.df_node[k + 1] + self.a_node[k + 1];
                hermite(self.a_node[k], da0, self.a_node[k + 1], da1, self.step, u)
            }
            None => self.a_exact(x),
        }
    }

    /// `a(x)` from the nearest lower node's `J` plus one Gauss-Legendre panel.
    pub fn a_exact(&self, x: f64) -> f64 {
        let fx = |s: f64| f_from_f(&self.f, s);
        match self.locate(x) {
            Some((k, _)) => {
                let lo = k as f64 * self.step;
                let j = self.j_node[k] - gauss_legendre(&|s: f64| (-s).exp() * fx(s), lo, x);
                fx(x) - x.exp() * j
            }
            None => a_function(&fx, x).unwrap_or(0.0),
        }
    }
}

fn hermite(y0: f64, d0: f64, y1: f64, d1: f64, h: f64, u: f64) -> f64 {
    let u2 = u * u;
    let u3 = u2 * u;
    (2.0 * u3 - 3.0 * u2 + 1.0) * y0
        + (u3 - 2.0 * u2 + u) * h * d0
        + (-2.0 * u3 + 3.0 * u2) * y1
        + (u3 - u2) * h * d1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Worst margin observed; negative values are violations.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub gamma: f64,
    pub m: usize,
    pub m_bound_rhs: f64,
    pub r_bound: f64,
    pub checks: Vec<Check>,
}

impl RatioReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// The x-grid on which the functional inequalities are evaluated.
pub fn condition_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (1..=500).map(|k| k as f64 * 1e-4).collect();
    grid.extend((6..=500).map(|k| k as f64 * 0.01));
    grid
}

/// `(-s - Gamma)/(Gamma + (1 - Gamma) s)` with `s = f'(0)`; infinite when the
/// denominator vanishes with a positive numerator.
fn rate_bound(slope: f64, gamma: f64) -> f64 {
    let num = -slope - gamma;
    let den = gamma + (1.0 - gamma) * slope;
    if den.abs() <= 1e-14 {
        if num > 0.0 { f64::INFINITY } else { f64::NAN }
    } else if den < 0.0 {
        f64::NAN
    } else {
        num / den
    }
}

fn min_or_inf(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(f64::INFINITY, f64::min)
}

fn check(name: &str, residual: f64) -> Check {
    Check { name: name.into(), pass: residual >= -CHECK_TOL, residual }
}

/// Evaluates every condition under which `gamma_discrete(f)` is a certified
/// competitive ratio with reset rate `r = m`.
pub fn check_conditions(f: &DiscreteF) -> RatioReport {
    check_conditions_with(f, &DualCurves::new(f))
}

pub fn check_conditions_with(f: &DiscreteF, curves: &DualCurves) -> RatioReport {
    let m = f.m;
    let ks = f.k_star();
    let c = f.c;
    let gamma = gamma_discrete(f);
    let mut checks = Vec::new();

    checks.push(check("convexity", min_or_inf((0..ks).map(|k| f.delta(2, k)))));

    let ratio = |k: usize| f.value(k + 1) / f.value(k);
    checks.push(check(
        "log_concavity",
        min_or_inf((0..ks).map(|k| ratio(k) - ratio(k + 1))),
    ));

    let pair = |k1: usize, k2: usize| {
        2.0 * f.delta(2, k1) * f.delta(2, k2)
            - f.delta(3, k1) * f.delta(1, k2)
            - f.delta(1, k1) * f.delta(3, k2)
    };
    checks.push(check(
        "discrete_log_concave",
        min_or_inf((0..ks).flat_map(|k1| (0..ks).map(move |k2| (k1, k2))).map(|(a, b)| pair(a, b))),
    ));

    // Pairs with one index in the geometric tail reduce to this inequality;
    // pairs with both in the tail hold with equality.
    checks.push(check(
        "discrete_log_concave_c",
        min_or_inf(
            (0..ks).map(|k| f.delta(3, k) + 2.0 * c * f.delta(2, k) + c * c * f.delta(1, k)),
        ),
    ));

    let m_slope = m as f64 * f.delta(1, 0);
    let m_bound_rhs = rate_bound(m_slope, gamma);
    checks.push(Check {
        name: "m_bound".into(),
        pass: m_bound_rhs >= m as f64,
        residual: m_bound_rhs - m as f64,
    });

    let slope0 = f_derivative(f, 0.0, 1);
    let r_bound = rate_bound(slope0, gamma);
    checks.push(Check {
        name: "r_bound".into(),
        pass: r_bound >= m as f64,
        residual: r_bound - m as f64,
    });

    checks.extend(functional_checks(f, curves, gamma, r_bound));

    RatioReport { gamma, m, m_bound_rhs, r_bound, checks }
}

fn functional_checks(f: &DiscreteF, curves: &DualCurves, gamma: f64, r_bound: f64) -> Vec<Check> {
    const FD_STEP: f64 = 1e-5;
    const ODE_LIMIT: f64 = 1e-6;
    let m = f.m as f64;
    let grid = condition_grid();
    let mut xs = vec![0.0];
    xs.extend(grid.iter().copied());
    let a = |x: f64| curves.a_exact(x);
    let fx = |x: f64| f_from_f(f, x);

    let mut ode = 0.0f64;
    let mut decr = f64::INFINITY;
    let mut lower = f64::INFINITY;
    let mut upper = f64::INFINITY;
    let mut convex = f64::INFINITY;
    let mut logc = f64::INFINITY;
    let mut deriv_rel = 0.0f64;
    for &x in &xs {
        let ax = a(x);
        let (fv, d1) = (fx(x), f_derivative(f, x, 1));
        let d_a = if x >= FD_STEP {
            (a(x + FD_STEP) - a(x - FD_STEP)) / (2.0 * FD_STEP)
        } else {
            (-3.0 * ax + 4.0 * a(x + FD_STEP) - a(x + 2.0 * FD_STEP)) / (2.0 * FD_STEP)
        };
        ode = ode.max((d_a - d1 - ax).abs());
        if fv > 1e-9 {
            decr = decr.min(-(d1 + ax) - CHECK_TOL);
        }
        lower = lower.min(ax - gamma * fv);
        upper = upper.min(gamma - ax);
        let (d2, d3) = (f_derivative(f, x, 2), f_derivative(f, x, 3));
        convex = convex.min(d2);
        logc = logc.min(d2 * d2 - d3 * d1);
        if x >= FD_STEP {
            let fd = (fx(x + FD_STEP) - fx(x - FD_STEP)) / (2.0 * FD_STEP);
            deriv_rel = deriv_rel.max((fd - d1).abs() / d1.abs().max(1e-300));
        }
    }

    let h = |x: f64| {
        let ax = a(x);
        let den = ax - fx(x) * gamma;
        let num = gamma - ax;
        // Identically zero denominators (exponential f) show up as rounding noise.
        if den <= 1e-10 * ax.abs() { f64::INFINITY } else { num / den }
    };
    let hs: Vec<f64> = grid.iter().map(|&x| h(x)).collect();
    let mut h_mono = f64::INFINITY;
    for w in hs.windows(2) {
        if w[0].is_finite() && w[1].is_finite() {
            h_mono = h_mono.min(w[1] - w[0] + 1e-6 * w[0].abs().max(1.0));
        } else if w[0].is_infinite() && w[1].is_finite() {
            h_mono = h_mono.min(-1.0);
        }
    }
    let h_min = min_or_inf(hs.iter().copied());
    // Linear extrapolation of h to the origin; both sides may be infinite.
    let (h1, h2) = (h(1e-4), h(2e-4));
    let h_limit = match (h1.is_finite() && h2.is_finite(), r_bound.is_finite()) {
        (true, true) => 1e-4 - (2.0 * h1 - h2 - r_bound).abs(),
        (false, false) => 0.0,
        _ => -1.0,
    };

    vec![
        Check { name: "a_ode".into(), pass: ode < ODE_LIMIT, residual: ODE_LIMIT - ode },
        Check {
            name: "a_gamma".into(),
            pass: (a(0.0) - gamma).abs() <= 1e-10,
            residual: 1e-10 - (a(0.0) - gamma).abs(),
        },
        check("a_decreasing", decr),
        check("f_lower_a", lower),
        check("a_upper_gamma", upper),
        check("f_convex", convex),
        check("f_prime_log_concave", logc),
        Check {
            name: "f_derivative_fd".into(),
            pass: deriv_rel < 1e-6,
            residual: 1e-6 - deriv_rel,
        },
        check("h_monotone", h_mono),
        Check { name: "h_limit".into(), pass: h_limit >= 0.0, residual: h_limit },
        Check { name: "r_upper_bound_grid".into(), pass: h_min >= m, residual: h_min - m },
    ]
}
