//! Interval estimates and goodness-of-fit statistics for Monte Carlo checks.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Wilson score interval for `successes` out of `n` at `z` standard deviations.
pub fn wilson(successes: u64, n: u64, z: f64) -> Interval {
    if n == 0 {
        return Interval { lo: 0.0, hi: 1.0 };
    }
    let n = n as f64;
    let phat = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (phat + z2 / (2.0 * n)) / denom;
    let half = z * (phat * (1.0 - phat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Interval { lo: (centre - half).max(0.0), hi: (centre + half).min(1.0) }
}

/// Binomial standard error of a proportion estimate.
pub fn proportion_se(successes: u64, n: u64) -> f64 {
    let phat = successes as f64 / n as f64;
    (phat * (1.0 - phat) / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub n: u64,
    pub mean: f64,
    pub se: f64,
}

/// Sample mean and its standard error, summed in slice order.
pub fn mean_se(xs: &[f64]) -> MeanEstimate {
    let n = xs.len();
    if n == 0 {
        return MeanEstimate { n: 0, mean: f64::NAN, se: f64::NAN };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    MeanEstimate { n: n as u64, mean, se: (var / n as f64).sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovEstimate {
    pub n: u64,
    pub cov: f64,
    pub se: f64,
}

/// Sample covariance with a delta-method standard error (the standard error of
/// the mean of centred products).
pub fn covariance(xs: &[f64], ys: &[f64]) -> CovEstimate {
    let n = xs.len().min(ys.len());
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let products: Vec<f64> = xs[..n].iter().zip(&ys[..n]).map(|(x, y)| (x - mx) * (y - my)).collect();
    let est = mean_se(&products);
    CovEstimate { n: n as u64, cov: est.mean * n as f64 / (n as f64 - 1.0).max(1.0), se: est.se }
}

/// Two-sided normal tail probability beyond `sigma`.
pub fn normal_two_sided_tail(sigma: f64) -> f64 {
    let normal = Normal::standard();
    2.0 * (1.0 - normal.cdf(sigma))
}

/// `Pr[K > k]` for the Kolmogorov distribution.
pub fn kolmogorov_sf(k: f64) -> f64 {
    if k <= 0.0 {
        return 1.0;
    }
    if k < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let term = (-2.0 * (j * j) as f64 * k * k).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Kolmogorov quantile matching the two-sided normal tail at `sigma`.
pub fn ks_critical(sigma: f64) -> f64 {
    let alpha = normal_two_sided_tail(sigma);
    let (mut lo, mut hi) = (0.2, 5.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_sf(mid) > alpha { lo = mid } else { hi = mid }
    }
    0.5 * (lo + hi)
}

/// One-sample Kolmogorov-Smirnov statistic `sup |F_n - F|`.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub n: u64,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn ks_test(samples: &mut [f64], cdf: impl Fn(f64) -> f64, sigma: f64) -> KsResult {
    let n = samples.len();
    let statistic = ks_statistic(samples, cdf);
    let threshold = ks_critical(sigma) / (n as f64).sqrt();
    KsResult { n: n as u64, statistic, threshold, pass: statistic <= threshold }
}
