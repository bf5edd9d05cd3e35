//! Independent Monte Carlo trials, each with a seed derived from
//! `(seed, trial index)`. Results come back in trial order whichever
//! backend runs them, so reductions are reproducible.

use crate::ocs::mix_seed;

pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    mix_seed(seed, trial)
}

pub fn run_sequential<T, F>(seed: u64, trials: u64, f: F) -> Vec<T>
where
    F: Fn(u64, u64) -> T,
{
    (0..trials).map(|t| f(t, trial_seed(seed, t))).collect()
}

#[cfg(feature = "parallel")]
pub fn run_parallel<T, F>(seed: u64, trials: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, u64) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..trials).into_par_iter().map(|t| f(t, trial_seed(seed, t))).collect()
}

/// Runs on the worker pool when the `parallel` feature is on.
pub fn run<T, F>(seed: u64, trials: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, u64) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        run_parallel(seed, trials, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        run_sequential(seed, trials, f)
    }
}

pub fn count<F>(seed: u64, trials: u64, f: F) -> u64
where
    F: Fn(u64, u64) -> bool + Sync + Send,
{
    run(seed, trials, f).into_iter().filter(|&b| b).count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backends_agree() {
        let f = |t: u64, s: u64| s.wrapping_mul(t + 1) % 1000;
        let seq = run_sequential(3, 500, f);
        assert_eq!(run(3, 500, f), seq);
        assert_ne!(run(4, 500, f), seq);
    }
}
