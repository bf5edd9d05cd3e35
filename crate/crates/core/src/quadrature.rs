//! One-dimensional quadrature used by the ratio calculus.

use crate::error::{Error, Result};

const MAX_DEPTH: u32 = 48;

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let c = 0.5 * (a + b);
    let fc = f(c);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    simpson_step(f, a, b, fa, fb, fc, whole, tol, MAX_DEPTH)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = 0.5 * (a + b);
    let (d, e) = (0.5 * (a + c), 0.5 * (c + b));
    let (fd, fe) = (f(d), f(e));
    let left = (c - a) / 6.0 * (fa + 4.0 * fd + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fe + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, c, fa, fc, fd, left, 0.5 * tol, depth - 1)
        + simpson_step(f, c, b, fc, fb, fe, right, 0.5 * tol, depth - 1)
}

/// `\int_0^\infty e^{-t} f(t) dt` for `f` bounded in `[0, 1]`.
///
/// The range is cut at the first `T` (doubling from 1) where `e^{-T} f(T)`
/// and the bound `e^{-T}` on the remainder are both below `1e-14`, then split
/// into unit panels so kinks are resolved locally.
pub fn exp_weighted_integral<F: Fn(f64) -> f64>(f: &F, tol: f64) -> Result<f64> {
    let mut t_end: f64 = 1.0;
    while (-t_end).exp() * f(t_end).abs().max(1.0) >= 1e-14 {
        t_end *= 2.0;
        if t_end > 1e4 {
            return Err(Error::NonVanishingTail(t_end));
        }
    }
    let panels = t_end.ceil() as usize;
    let g = |t: f64| (-t).exp() * f(t);
    Ok((0..panels)
        .map(|k| adaptive_simpson(&g, k as f64, (k + 1) as f64, tol / panels as f64))
        .sum())
}

/// Eight-point Gauss-Legendre rule on `[a, b]`.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    const NODES: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const WEIGHTS: [f64; 4] = [
        0.362_683_783_378_362,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    half * NODES
        .iter()
        .zip(WEIGHTS)
        .map(|(&x, w)| w * (f(mid - half * x) + f(mid + half * x)))
        .sum::<f64>()
}
