//! Experiment orchestration: Monte Carlo estimators for the selector's
//! guarantees, the matching benchmark, the impossibility arithmetic, and the
//! report files behind the `ocs` command line tool.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::matching::{opt_offline, plan_matching, simulate_plan, Instance};
use crate::ocs::{ElementId, OcsModel, OcsState, RoundInput, DEFAULT_CELLS};
use crate::ratios::{check_conditions_with, f_from_f, gamma_discrete, gamma_fahrbach, DiscreteF, DualCurves};
use crate::stats::{covariance, ks_test, mean_se, wilson, Interval, KsResult};
use crate::trials;
use crate::win_distribution::{
    build_win_model, check_small, compute_f, enumerate_prefix, seed_sample, small_gap, FTable, SeedParams, WinModel,
};

pub const DEFAULT_OCS_TRIALS: u64 = 100_000;
pub const DEFAULT_MATCHING_TRIALS: u64 = 10_000;

/// Flags and config-file fields. Anything left unset takes its default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u64>,
    pub p: f64,
    pub m: usize,
    pub y_max: usize,
    pub n_max: usize,
    /// Tolerance multiplier in standard deviations.
    pub sigma: f64,
    pub cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fahrbach: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_masses: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offline: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub online: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p3: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: None,
            p: 0.48,
            m: 6,
            y_max: 30,
            n_max: 10,
            sigma: 3.0,
            cells: DEFAULT_CELLS,
            fahrbach: None,
            mode: None,
            counts: None,
            separation: None,
            script: None,
            block_masses: None,
            gap_mass: None,
            instance: None,
            generator: None,
            offline: None,
            online: None,
            p_min: None,
            p_max: None,
            p_step: None,
            p2: None,
            p3: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == Some(0) {
            return Err(Error::InvalidParameter("trials must be at least 1".into()));
        }
        if self.sigma.is_nan() || self.sigma < 1.0 {
            return Err(Error::InvalidParameter("sigma must be at least 1".into()));
        }
        if self.cells == 0 {
            return Err(Error::InvalidParameter("cells must be positive".into()));
        }
        self.params()?;
        Ok(())
    }

    pub fn params(&self) -> Result<SeedParams> {
        SeedParams::new(self.p, self.m, self.y_max)
    }

    pub fn trials_or(&self, default: u64) -> u64 {
        self.trials.unwrap_or(default)
    }
}

/// A discrete script for one tracked element. `None` entries are filler
/// slots that receive a fresh id every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub tracked: ElementId,
    pub rounds: Vec<Vec<Option<ElementId>>>,
    /// Disjoint sets of round indices; the bound is the product of
    /// `F(count)` over these.
    pub blocks: Vec<Vec<usize>>,
}

const FRESH_BASE: ElementId = 1 << 40;

impl SequenceSpec {
    /// Blocks of consecutive appearances (multiplicity one, other slots
    /// fresh), separated by `separation` rounds of fresh fillers only.
    pub fn from_counts(m: usize, counts: &[usize], separation: usize) -> Self {
        let tracked = 0;
        let mut rounds = Vec::new();
        let mut blocks = Vec::new();
        for (b, &count) in counts.iter().enumerate() {
            if b > 0 {
                rounds.extend((0..separation).map(|_| vec![None; m]));
            }
            let start = rounds.len();
            for _ in 0..count {
                let mut round = vec![Some(tracked)];
                round.extend(std::iter::repeat_n(None, m - 1));
                rounds.push(round);
            }
            blocks.push((start..rounds.len()).collect());
        }
        Self { tracked, rounds, blocks }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        for (j, round) in self.rounds.iter().enumerate() {
            if round.len() != m {
                return Err(Error::InvalidRound(format!("round {j} has {} slots instead of {m}", round.len())));
            }
            if round.iter().any(|s| matches!(s, Some(id) if *id >= FRESH_BASE)) {
                return Err(Error::InvalidRound(format!("round {j} uses an id reserved for fillers")));
            }
        }
        let mut seen = vec![false; self.rounds.len()];
        for block in &self.blocks {
            for &j in block {
                if j >= self.rounds.len() || std::mem::replace(&mut seen[j], true) {
                    return Err(Error::Malformed(format!("block round {j} out of range or repeated")));
                }
            }
        }
        Ok(())
    }

    pub fn count(&self, block: &[usize]) -> usize {
        block
            .iter()
            .map(|&j| self.rounds[j].iter().filter(|s| **s == Some(self.tracked)).count())
            .sum()
    }

    pub fn bound(&self, table: &FTable) -> f64 {
        self.blocks.iter().map(|b| table.value(self.count(b))).product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeverWinReport {
    pub trials: u64,
    pub never_won: u64,
    pub estimate: f64,
    pub ci: Interval,
    pub bound: f64,
    pub pass: bool,
}

/// Runs the script through fresh selectors and counts trials in which the
/// tracked element wins no round inside the blocks. Passes when the Wilson
/// lower limit at `sigma` does not exceed the bound.
pub fn mc_never_win(spec: &SequenceSpec, model: &Arc<OcsModel>, table: &FTable, trials: u64, seed: u64, sigma: f64) -> Result<NeverWinReport> {
    spec.validate(model.m())?;
    let in_block: Vec<bool> = {
        let mut v = vec![false; spec.rounds.len()];
        spec.blocks.iter().flatten().for_each(|&j| v[j] = true);
        v
    };
    let outcomes = trials::run(seed, trials, |_, s| -> Result<bool> {
        let mut ocs = OcsState::new(Arc::clone(model), s);
        let mut fresh = FRESH_BASE;
        let mut never = true;
        for (j, round) in spec.rounds.iter().enumerate() {
            let ids: Vec<ElementId> = round
                .iter()
                .map(|slot| {
                    slot.unwrap_or_else(|| {
                        fresh += 1;
                        fresh
                    })
                })
                .collect();
            let winner = ocs.step(&RoundInput::from_ids(&ids))?;
            if in_block[j] && winner == spec.tracked {
                never = false;
            }
        }
        Ok(never)
    });
    let never_won = outcomes.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&b| b).count() as u64;
    let ci = wilson(never_won, trials, sigma);
    let bound = spec.bound(table);
    Ok(NeverWinReport { trials, never_won, estimate: never_won as f64 / trials as f64, ci, bound, pass: ci.lo <= bound })
}

/// Continuous script: the tracked element gets `s1[k]` in consecutive steps,
/// then `gap` in one step outside both blocks, then `s2[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSpec {
    pub s1: Vec<f64>,
    pub gap: f64,
    pub s2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub trials: u64,
    pub never_selected: u64,
    pub estimate: f64,
    pub ci: Interval,
    pub mix_weight: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Bound `w f(w1 + w2) + (1 - w) f(w1) f(w2)` with `w = (1 - m gap)_+`.
pub fn gap_bound(f: &DiscreteF, spec: &GapSpec) -> (f64, f64) {
    let w1: f64 = spec.s1.iter().sum();
    let w2: f64 = spec.s2.iter().sum();
    let w = (1.0 - f.m() as f64 * spec.gap).max(0.0);
    (w, w * f_from_f(f, w1 + w2) + (1.0 - w) * f_from_f(f, w1) * f_from_f(f, w2))
}

pub fn mc_gap_property(spec: &GapSpec, model: &Arc<OcsModel>, f: &DiscreteF, trials: u64, seed: u64, sigma: f64) -> Result<GapReport> {
    let m = model.m();
    let steps: Vec<(f64, bool)> = spec
        .s1
        .iter()
        .map(|&q| (q, true))
        .chain(std::iter::once((spec.gap, false)))
        .chain(spec.s2.iter().map(|&q| (q, true)))
        .collect();
    if steps.iter().any(|&(q, _)| !(0.0..=1.0).contains(&q)) {
        return Err(Error::InvalidParameter("step masses must lie in [0, 1]".into()));
    }
    let tracked: ElementId = 0;
    let outcomes = trials::run(seed, trials, |_, s| -> Result<bool> {
        let mut ocs = OcsState::new(Arc::clone(model), s);
        let mut fresh = FRESH_BASE;
        let mut never = true;
        for &(q, counted) in &steps {
            let mut probs = vec![(tracked, q)];
            let share = (1.0 - q) / m as f64;
            for _ in 0..m {
                fresh += 1;
                probs.push((fresh, share));
            }
            if ocs.continuous_step(&probs)? == Some(tracked) && counted {
                never = false;
            }
        }
        Ok(never)
    });
    let never_selected = outcomes.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&b| b).count() as u64;
    let ci = wilson(never_selected, trials, sigma);
    let (mix_weight, bound) = gap_bound(f, spec);
    Ok(GapReport {
        trials,
        never_selected,
        estimate: never_selected as f64 / trials as f64,
        ci,
        mix_weight,
        bound,
        pass: ci.lo <= bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub r: usize,
    pub w: f64,
    pub wins: u64,
    pub trials: u64,
    pub estimate: f64,
    pub ci: Interval,
    pub pass: bool,
}

/// Tournament with the tracked element pinned at desired probability `w`
/// (multiplicity `r`) against `m - r` fresh singletons whose desired
/// probabilities follow the multiplicity-one law.
pub fn mc_tournament_consistency(model: &OcsModel, r: usize, w: f64, trials: u64, seed: u64, sigma: f64) -> Result<ConsistencyRow> {
    let m = model.m();
    let own = model.coupling(r);
    let single = model.coupling(1);
    let values = single.source.values().to_vec();
    let mut cdf = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for &q in single.source.masses() {
        acc += q;
        cdf.push(acc);
    }
    let outcomes = trials::run(seed, trials, |_, s| -> Result<bool> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let strength = own.strength(w, &mut rng)?;
        for _ in 0..m - r {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&c| c <= u).min(values.len() - 1);
            if single.strength(values[k], &mut rng)? >= strength {
                return Ok(false);
            }
        }
        Ok(true)
    });
    let wins = outcomes.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&b| b).count() as u64;
    let ci = wilson(wins, trials, sigma);
    Ok(ConsistencyRow { r, w, wins, trials, estimate: wins as f64 / trials as f64, ci, pass: ci.hi >= w })
}

/// KS test of the unconditional strength law against `t^r`.
pub fn strength_marginal(model: &OcsModel, r: usize, trials: u64, seed: u64, sigma: f64) -> Result<KsResult> {
    let coupling = model.coupling(r);
    let values = coupling.source.values().to_vec();
    let masses = coupling.source.masses().to_vec();
    let draws = trials::run(seed, trials, |_, s| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut u: f64 = rng.random();
        let mut k = 0;
        while k + 1 < masses.len() && u >= masses[k] {
            u -= masses[k];
            k += 1;
        }
        coupling.strength(values[k], &mut rng)
    });
    let mut samples = draws.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(ks_test(&mut samples, |t| t.clamp(0.0, 1.0).powi(r as i32), sigma))
}

/// Support values spread over the quantiles of the multiplicity-`r` law.
pub fn quantile_sample(model: &OcsModel, r: usize, count: usize) -> Vec<f64> {
    let source = &model.coupling(r).source;
    let mut out = Vec::new();
    let mut acc = 0.0;
    let mut next = 0;
    for (v, q) in source.atoms() {
        acc += q;
        while next < count && acc >= (next as f64 + 0.5) / count as f64 {
            if out.last() != Some(&v) {
                out.push(v);
            }
            next += 1;
        }
    }
    if let Some(&top) = source.values().last() {
        if out.last() != Some(&top) {
            out.push(top);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeArith {
    pub violation_a: f64,
    pub violation_b: f64,
    pub contradiction: bool,
}

/// Feeding pairs `(a,b), (b,c), (a,b)`: with `p2` the chance `b` wins round 2
/// and `p3` the chance `a` wins round 3, one of the two never-selected events
/// is too likely for a selector whose parameter exceeds 1/3.
pub fn negative_arith(p2: f64, p3: f64) -> Result<NegativeArith> {
    if !(0.0..=1.0).contains(&p2) || !(0.0..=1.0).contains(&p3) {
        return Err(Error::InvalidParameter("probabilities must lie in [0, 1]".into()));
    }
    let violation_a = 0.5 * p2 * p3;
    let violation_b = 0.5 * p2 * (1.0 - p3);
    let contradiction = p2 > 2.0 / 3.0 && violation_a.max(violation_b) > 1.0 / 6.0;
    Ok(NegativeArith { violation_a, violation_b, contradiction })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaRow {
    pub name: String,
    pub cov: f64,
    pub se: f64,
    pub upper: f64,
    pub pass: bool,
}

/// Covariances of increasing functions of the seed sequence on disjoint
/// index sets.
pub fn na_test(params: &SeedParams, trials: u64, seed: u64, sigma: f64) -> Vec<NaRow> {
    let horizon = 6;
    let samples: Vec<Vec<i64>> = trials::run(seed, trials, |_, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        seed_sample(params, horizon, &mut rng).0
    });
    let max_of = |y: &[i64]| *y.iter().max().unwrap() as f64;
    type Pair = Box<dyn Fn(&[i64]) -> (f64, f64)>;
    let battery: Vec<(&str, Pair)> = vec![
        ("y1 vs y2", Box::new(|y: &[i64]| (y[0] as f64, y[1] as f64))),
        ("y1 vs max(y3,y4)", Box::new(move |y: &[i64]| (y[0] as f64, max_of(&y[2..4])))),
        ("y1 vs max(y2..y5)", Box::new(move |y: &[i64]| (y[0] as f64, max_of(&y[1..5])))),
        ("y1+y2 vs y3+y4", Box::new(|y: &[i64]| ((y[0] + y[1]) as f64, (y[2] + y[3]) as f64))),
        ("max(y1,y2) vs y6", Box::new(move |y: &[i64]| (max_of(&y[0..2]), y[5] as f64))),
        ("y1 vs constant", Box::new(|y: &[i64]| (y[0] as f64, 1.0))),
    ];
    battery
        .into_iter()
        .map(|(name, f)| {
            let (xs, ys): (Vec<f64>, Vec<f64>) = samples.iter().map(|y| f(y)).unzip();
            let est = covariance(&xs, &ys);
            let upper = est.cov - sigma * est.se;
            NaRow { name: name.into(), cov: est.cov, se: est.se, upper, pass: upper <= 0.0 }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub gamma: f64,
    pub small_holds: bool,
}

/// Grid search over `p`; the argmax is taken among values whose certificate
/// holds for every multiplicity.
pub fn sweep_p(config: &ExperimentConfig, p_min: f64, p_max: f64, step: f64) -> Result<(Vec<SweepRow>, Option<SweepRow>)> {
    let count = ((p_max - p_min) / step + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=count).map(|k| ((p_min + k as f64 * step) * 1e6).round() / 1e6).collect();
    let rows = grid
        .iter()
        .map(|&p| -> Result<SweepRow> {
            let model = build_win_model(SeedParams::new(p, config.m, config.y_max)?)?;
            let table = compute_f(&model, config.n_max)?;
            let gamma = gamma_discrete(&DiscreteF::from_table(&table));
            let small_holds = (1..config.m).map(|r| check_small(&model, r).map(|c| c.holds)).collect::<Result<Vec<_>>>()?;
            Ok(SweepRow { p, gamma, small_holds: small_holds.into_iter().all(|h| h) })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .filter(|r| r.small_holds)
        .max_by(|a, b| a.gamma.total_cmp(&b.gamma).then(b.p.total_cmp(&a.p)))
        .cloned();
    Ok((rows, best))
}

/// Fixed desk-scale instances for the end-to-end ratio check.
pub fn benchmark_instances(seed: u64) -> Vec<(String, Instance)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        ("upper-triangular-6x12".into(), Instance::upper_triangular(6, 12)),
        ("random-8x20".into(), Instance::random_uniform(&mut rng, 8, 20, 0.4)),
        ("random-4x6".into(), Instance::random_uniform(&mut rng, 4, 6, 0.7)),
        ("duplicate-6x15".into(), Instance::duplicate_heavy(&mut rng, 6, 15)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingSummary {
    pub name: String,
    pub offline: usize,
    pub online: usize,
    pub opt: f64,
    pub gamma: f64,
    pub primal: f64,
    pub dual: f64,
    pub min_step_gap: f64,
    pub min_final_slack: f64,
    pub violations: Vec<String>,
    pub trials: u64,
    pub mean: f64,
    pub se: f64,
    pub ratio: f64,
    /// Smallest `y_i(w)` minus the Wilson lower limit of the empirical
    /// unmatched frequency at that level; negative is a violation.
    pub bookkeeping_margin: f64,
    pub pass: bool,
}

pub struct MatchingRun {
    pub summary: MatchingSummary,
    pub weights: Vec<f64>,
}

/// Plans the instance once, then simulates the selector over independent
/// trials. Passes when the duality checks are clean, the mean matched
/// weight is at least `Gamma OPT - sigma se`, and no level is unmatched
/// more often than its tracked `y_i(w)` allows.
pub fn mc_matching(name: &str, instance: &Instance, curves: &DualCurves, model: &Arc<OcsModel>, trials: u64, seed: u64, sigma: f64) -> Result<MatchingRun> {
    let opt = opt_offline(instance)?;
    let plan = plan_matching(instance, curves, model.m() as f64)?;
    let results = trials::run(seed, trials, |_, s| simulate_plan(instance, &plan, model, s));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = results.iter().map(|r| r.matched_weight).collect();
    let est = mean_se(&weights);
    let gamma = curves.gamma();
    // Empirical Pr[i unmatched at level w] against the tracked y_i(w), one
    // level per step of the final profile.
    let mut bookkeeping_margin = f64::INFINITY;
    for (i, state) in plan.states.iter().enumerate() {
        for (k, profile) in state.profiles.iter().enumerate() {
            let level = state.breakpoints[k + 1];
            let unmatched = results.iter().filter(|r| r.assigned[i] < level).count() as u64;
            let ci = wilson(unmatched, trials, sigma);
            bookkeeping_margin = bookkeeping_margin.min(profile.y(curves) - ci.lo);
        }
    }
    let pass = plan.violations.is_empty()
        && est.mean >= gamma * opt - sigma * est.se
        && bookkeeping_margin >= 0.0;
    Ok(MatchingRun {
        summary: MatchingSummary {
            name: name.into(),
            offline: instance.num_offline(),
            online: instance.num_online(),
            opt,
            gamma,
            primal: plan.primal(),
            dual: plan.dual(),
            min_step_gap: plan.min_step_gap,
            min_final_slack: plan.min_final_slack,
            violations: plan.violations.clone(),
            trials,
            mean: est.mean,
            se: est.se,
            ratio: if opt > 0.0 { est.mean / opt } else { 1.0 },
            bookkeeping_margin,
            pass,
        },
        weights,
    })
}

/// A report ready to be written: JSON body plus named CSV tables.
#[derive(Debug, Clone)]
pub struct Report {
    pub command: String,
    pub pass: bool,
    pub body: Value,
    pub tables: Vec<(String, String)>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let doc = json!({ "command": self.command, "pass": self.pass, "report": self.body });
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }

    /// Writes `report.json` and each table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Malformed(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join("report.json"), self.to_json()).map_err(io)?;
        for (name, body) in &self.tables {
            std::fs::write(dir.join(name), body).map_err(io)?;
        }
        Ok(())
    }
}

fn csv<I: IntoIterator<Item = Vec<String>>>(header: &[&str], rows: I) -> String {
    let mut writer = ::csv::Writer::from_writer(Vec::new());
    writer.write_record(header).expect("in-memory write");
    for row in rows {
        writer.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn table_for(config: &ExperimentConfig) -> Result<(WinModel, FTable)> {
    let model = build_win_model(config.params()?)?;
    let table = compute_f(&model, config.n_max)?;
    Ok((model, table))
}

pub fn report_compute_f(config: &ExperimentConfig) -> Result<Report> {
    let (_, table) = table_for(config)?;
    let ratios: Vec<f64> = table.head.windows(2).map(|w| w[1] / w[0]).collect();
    let decreasing = table.head.windows(2).all(|w| w[1] < w[0]);
    let ratios_decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    let rows = table.head.iter().enumerate().map(|(n, v)| vec![n.to_string(), v.to_string()]);
    Ok(Report {
        command: "compute-f".into(),
        pass: decreasing && ratios_decreasing,
        body: json!({
            "config": config,
            "table": table,
            "ratios": ratios,
            "head_decreasing": decreasing,
            "ratios_decreasing": ratios_decreasing,
        }),
        tables: vec![("f_table.csv".into(), csv(&["n", "F"], rows))],
    })
}

pub fn report_gamma(config: &ExperimentConfig) -> Result<Report> {
    let (f, closed_form) = match config.fahrbach {
        Some(g) => (DiscreteF::fahrbach(g)?, Some(gamma_fahrbach(g)?)),
        None => (DiscreteF::from_table(&table_for(config)?.1), None),
    };
    let curves = DualCurves::new(&f);
    let report = check_conditions_with(&f, &curves);
    let grid: Vec<f64> = (0..=500).map(|k| k as f64 * 0.01).collect();
    let rows = grid.iter().map(|&x| vec![x.to_string(), curves.f(x).to_string(), curves.a(x).to_string()]);
    Ok(Report {
        command: "gamma".into(),
        pass: report.all_pass(),
        body: json!({
            "config": config,
            "gamma_discrete": gamma_discrete(&f),
            "gamma_fahrbach": closed_form,
            "ratio_report": report,
        }),
        tables: vec![("f_a_curves.csv".into(), csv(&["x", "f", "a"], rows))],
    })
}

pub fn report_check_small(config: &ExperimentConfig) -> Result<Report> {
    let model = build_win_model(config.params()?)?;
    let mut certs = Vec::new();
    let mut rows = Vec::new();
    for r in 1..config.m {
        certs.push(check_small(&model, r)?);
        let dist = enumerate_prefix(&model, r)?;
        for k in 0..=1000 {
            let t = k as f64 / 1000.0;
            rows.push(vec![r.to_string(), t.to_string(), small_gap(&dist, r, config.m, t).to_string()]);
        }
    }
    Ok(Report {
        command: "check-small".into(),
        pass: certs.iter().all(|c| c.holds),
        body: json!({ "config": config, "certificates": certs }),
        tables: vec![("g_curves.csv".into(), csv(&["r", "t", "g"], rows))],
    })
}

fn ocs_model(config: &ExperimentConfig) -> Result<Arc<OcsModel>> {
    Ok(Arc::new(OcsModel::new(build_win_model(config.params()?)?, config.cells)?))
}

pub fn report_simulate_ocs(config: &ExperimentConfig) -> Result<Report> {
    let trials = config.trials_or(DEFAULT_OCS_TRIALS);
    let model = ocs_model(config)?;
    let (_, table) = table_for(config)?;
    let mode = config.mode.as_deref().unwrap_or("never-win");
    match mode {
        "never-win" => {
            let spec = match &config.script {
                Some(path) => SequenceSpec::from_json_file(path)?,
                None => SequenceSpec::from_counts(
                    config.m,
                    config.counts.as_deref().unwrap_or(&[3]),
                    config.separation.unwrap_or(5),
                ),
            };
            let result = mc_never_win(&spec, &model, &table, trials, config.seed, config.sigma)?;
            Ok(Report {
                command: "simulate-ocs".into(),
                pass: result.pass,
                body: json!({ "config": config, "mode": mode, "spec": spec, "result": result }),
                tables: Vec::new(),
            })
        }
        "gap" => {
            let masses = config.block_masses.clone().unwrap_or_else(|| vec![0.1, 0.1, 0.1]);
            let spec = GapSpec { s1: masses.clone(), gap: config.gap_mass.unwrap_or(0.05), s2: masses };
            let f = DiscreteF::from_table(&table);
            let result = mc_gap_property(&spec, &model, &f, trials, config.seed, config.sigma)?;
            Ok(Report {
                command: "simulate-ocs".into(),
                pass: result.pass,
                body: json!({ "config": config, "mode": mode, "spec": spec, "result": result }),
                tables: Vec::new(),
            })
        }
        "consistency" => {
            let mut rows = Vec::new();
            for r in 1..config.m.min(4) {
                let values = if r == 1 { model.coupling(1).source.values().to_vec() } else { quantile_sample(&model, r, 8) };
                for (k, w) in values.into_iter().enumerate() {
                    let seed = crate::ocs::mix_seed(config.seed, (r * 1000 + k) as u64);
                    rows.push(mc_tournament_consistency(&model, r, w, trials, seed, config.sigma)?);
                }
            }
            let marginals = (1..config.m)
                .map(|r| strength_marginal(&model, r, trials, crate::ocs::mix_seed(config.seed, 77 + r as u64), config.sigma))
                .collect::<Result<Vec<_>>>()?;
            let pass = rows.iter().all(|r| r.pass) && marginals.iter().all(|k| k.pass);
            let csv_rows = rows
                .iter()
                .map(|c| vec![c.r.to_string(), c.w.to_string(), c.estimate.to_string(), c.ci.lo.to_string(), c.ci.hi.to_string()]);
            Ok(Report {
                command: "simulate-ocs".into(),
                pass,
                body: json!({ "config": config, "mode": mode, "consistency": rows, "strength_ks": marginals }),
                tables: vec![("consistency.csv".into(), csv(&["r", "w", "win_rate", "ci_lo", "ci_hi"], csv_rows))],
            })
        }
        other => Err(Error::InvalidParameter(format!("unknown mode {other}; expected never-win, gap or consistency"))),
    }
}

fn matching_instances(config: &ExperimentConfig) -> Result<Vec<(String, Instance)>> {
    if let Some(path) = &config.instance {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        return Ok(vec![(path.display().to_string(), Instance::from_json(&text)?)]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.offline.unwrap_or(6);
    let m = config.online.unwrap_or(12);
    Ok(match config.generator.as_deref().unwrap_or("benchmark") {
        "benchmark" => benchmark_instances(config.seed),
        "upper-triangular" => vec![("upper-triangular".into(), Instance::upper_triangular(n, m))],
        "random" => vec![("random".into(), Instance::random_uniform(&mut rng, n, m, 0.5))],
        "duplicate" => vec![("duplicate".into(), Instance::duplicate_heavy(&mut rng, n, m))],
        other => return Err(Error::InvalidParameter(format!("unknown generator {other}"))),
    })
}

pub fn report_simulate_matching(config: &ExperimentConfig) -> Result<Report> {
    let trials = config.trials_or(DEFAULT_MATCHING_TRIALS);
    let (_, table) = table_for(config)?;
    let curves = DualCurves::new(&DiscreteF::from_table(&table));
    let model = ocs_model(config)?;
    let mut summaries = Vec::new();
    let mut rows = Vec::new();
    for (k, (name, instance)) in matching_instances(config)?.into_iter().enumerate() {
        let run = mc_matching(&name, &instance, &curves, &model, trials, crate::ocs::mix_seed(config.seed, k as u64), config.sigma)?;
        for (t, w) in run.weights.iter().enumerate() {
            let ratio = if run.summary.opt > 0.0 { w / run.summary.opt } else { 1.0 };
            rows.push(vec![name.clone(), t.to_string(), w.to_string(), run.summary.opt.to_string(), ratio.to_string()]);
        }
        summaries.push(run.summary);
    }
    Ok(Report {
        command: "simulate-matching".into(),
        pass: summaries.iter().all(|s| s.pass),
        body: json!({ "config": config, "instances": summaries }),
        tables: vec![("matching_trials.csv".into(), csv(&["instance", "trial", "matched_weight", "opt", "ratio"], rows))],
    })
}

pub fn report_sweep_p(config: &ExperimentConfig) -> Result<Report> {
    let (rows, best) = sweep_p(
        config,
        config.p_min.unwrap_or(0.05),
        config.p_max.unwrap_or(0.95),
        config.p_step.unwrap_or(0.01),
    )?;
    let csv_rows = rows.iter().map(|r| vec![r.p.to_string(), r.gamma.to_string(), r.small_holds.to_string()]);
    Ok(Report {
        command: "sweep-p".into(),
        pass: best.is_some(),
        body: json!({ "config": config, "argmax": best, "rows": rows }),
        tables: vec![("sweep_p.csv".into(), csv(&["p", "gamma", "small_holds"], csv_rows))],
    })
}

/// Empirical frequencies of the two never-selected events of the three-pair
/// instance under this crate's selector, each pair element taking half the
/// slots. Informational only.
pub fn negative_empirical(model: &Arc<OcsModel>, trials: u64, seed: u64) -> Result<(f64, f64)> {
    let half = model.m() / 2;
    let (a, b, c) = (1, 2, 3);
    let pairs = [(a, b), (b, c), (a, b)];
    let outcomes = trials::run(seed, trials, |_, s| -> Result<(bool, bool)> {
        let mut ocs = OcsState::new(Arc::clone(model), s);
        let mut winners = Vec::new();
        for &(x, y) in &pairs {
            let round = RoundInput::from_multiplicities(vec![(x, half), (y, model.m() - half)])?;
            winners.push(ocs.step(&round)?);
        }
        Ok((winners[1] != b && winners[2] != b, winners[0] != a && winners[2] != a))
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let n = trials as f64;
    Ok((
        outcomes.iter().filter(|o| o.0).count() as f64 / n,
        outcomes.iter().filter(|o| o.1).count() as f64 / n,
    ))
}

pub fn report_stress_negative(config: &ExperimentConfig) -> Result<Report> {
    if let (Some(p2), Some(p3)) = (config.p2, config.p3) {
        let result = negative_arith(p2, p3)?;
        return Ok(Report {
            command: "stress-negative".into(),
            pass: true,
            body: json!({ "config": config, "p2": p2, "p3": p3, "result": result }),
            tables: Vec::new(),
        });
    }
    // The region is p2 > 2/3 and max(p3, 1 - p3) > 1/(3 p2); scan it on a
    // grid of rationals and compare with the direct arithmetic.
    let steps = 120;
    let mut rows = Vec::new();
    let mut mismatches = 0;
    for i in 0..=steps {
        for j in 0..=steps {
            let (p2, p3) = (i as f64 / steps as f64, j as f64 / steps as f64);
            let res = negative_arith(p2, p3)?;
            let expected = 3 * i > 2 * steps && {
                let top = j.max(steps - j);
                // max(p3, 1 - p3) * p2 / 2 > 1/6  <=>  3 * top * i > steps^2
                3 * top * i > steps * steps
            };
            if res.contradiction != expected {
                mismatches += 1;
            }
            rows.push(vec![p2.to_string(), p3.to_string(), res.violation_a.to_string(), res.violation_b.to_string(), res.contradiction.to_string()]);
        }
    }
    let model = ocs_model(config)?;
    let (never_b, never_a) = negative_empirical(&model, config.trials_or(DEFAULT_OCS_TRIALS), config.seed)?;
    Ok(Report {
        command: "stress-negative".into(),
        pass: mismatches == 0,
        body: json!({
            "config": config,
            "grid_points": (steps + 1) * (steps + 1),
            "mismatches": mismatches,
            "empirical": { "b_unpicked_rounds_2_3": never_b, "a_unpicked_rounds_1_3": never_a },
        }),
        tables: vec![("negative_grid.csv".into(), csv(&["p2", "p3", "violation_a", "violation_b", "contradiction"], rows))],
    })
}

pub fn report_na_test(config: &ExperimentConfig) -> Result<Report> {
    let rows = na_test(&config.params()?, config.trials_or(DEFAULT_OCS_TRIALS), config.seed, config.sigma);
    Ok(Report {
        command: "na-test".into(),
        pass: rows.iter().all(|r| r.pass),
        body: json!({ "config": config, "pairs": rows }),
        tables: Vec::new(),
    })
}

mod cli {
    use super::*;
    use clap::{Args, Parser, Subcommand};

    #[derive(Parser)]
    #[command(name = "ocs", about = "Multiway online correlated selection: tables, ratios and simulations")]
    struct Cli {
        #[command(subcommand)]
        command: Command,
    }

    #[derive(Args, Clone, Default)]
    struct Common {
        /// JSON file with any of the flag values; flags given here win.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u64>,
        /// Directory for report.json and CSV tables; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        y_max: Option<usize>,
        #[arg(long, visible_alias = "n")]
        n_max: Option<usize>,
        #[arg(long)]
        cells: Option<usize>,
    }

    #[derive(Subcommand)]
    enum Command {
        /// Exact F(0..n) table.
        ComputeF {
            #[command(flatten)]
            common: Common,
        },
        /// Competitive ratio and side-condition report.
        Gamma {
            #[command(flatten)]
            common: Common,
            /// Use the gamma-OCS of the given parameter instead of the table.
            #[arg(long)]
            fahrbach: Option<f64>,
        },
        /// Sufficiency certificate for every multiplicity.
        CheckSmall {
            #[command(flatten)]
            common: Common,
        },
        /// Monte Carlo checks of the selector.
        SimulateOcs {
            #[command(flatten)]
            common: Common,
            /// never-win, gap or consistency.
            #[arg(long)]
            mode: Option<String>,
            /// Block sizes for never-win, comma separated.
            #[arg(long, value_delimiter = ',')]
            counts: Option<Vec<usize>>,
            #[arg(long)]
            separation: Option<usize>,
            /// JSON round script replacing --counts.
            #[arg(long)]
            script: Option<PathBuf>,
            /// Per-step masses of each block in gap mode.
            #[arg(long, value_delimiter = ',')]
            block_masses: Option<Vec<f64>>,
            #[arg(long)]
            gap_mass: Option<f64>,
        },
        /// Primal-dual matching against the offline optimum.
        SimulateMatching {
            #[command(flatten)]
            common: Common,
            #[arg(long)]
            instance: Option<PathBuf>,
            /// benchmark, upper-triangular, random or duplicate.
            #[arg(long)]
            generator: Option<String>,
            #[arg(long)]
            offline: Option<usize>,
            #[arg(long)]
            online: Option<usize>,
        },
        /// Grid search of p maximizing the ratio.
        SweepP {
            #[command(flatten)]
            common: Common,
            #[arg(long)]
            p_min: Option<f64>,
            #[arg(long)]
            p_max: Option<f64>,
            #[arg(long)]
            p_step: Option<f64>,
        },
        /// Arithmetic of the three-pair impossibility instance.
        StressNegative {
            #[command(flatten)]
            common: Common,
            #[arg(long)]
            p2: Option<f64>,
            #[arg(long)]
            p3: Option<f64>,
        },
        /// Covariance spot checks of the seed process.
        NaTest {
            #[command(flatten)]
            common: Common,
        },
    }

    fn merge(common: &Common) -> Result<ExperimentConfig> {
        let mut config = match &common.config {
            Some(path) => ExperimentConfig::from_json_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = common.$field.clone() { config.$field = v; } )* };
        }
        take!(seed, sigma, p, m, y_max, n_max, cells);
        if common.trials.is_some() {
            config.trials = common.trials;
        }
        Ok(config)
    }

    fn set<T>(slot: &mut Option<T>, value: Option<T>) {
        if value.is_some() {
            *slot = value;
        }
    }

    pub fn run(argv: &[String]) -> i32 {
        let cli = match Cli::try_parse_from(argv) {
            Ok(cli) => cli,
            Err(e) => {
                let code = if e.use_stderr() { 2 } else { 0 };
                let _ = e.print();
                return code;
            }
        };
        let outcome = (|| -> Result<(Report, Option<PathBuf>)> {
            let (common, report): (&Common, fn(&ExperimentConfig) -> Result<Report>);
            let mut config;
            match &cli.command {
                Command::ComputeF { common: c } => {
                    common = c;
                    config = merge(c)?;
                    report = report_compute_f;
                }
                Command::Gamma { common: c, fahrbach } => {
                    common = c;
                    config = merge(c)?;
                    set(&mut config.fahrbach, *fahrbach);
                    report = report_gamma;
                }
                Command::CheckSmall { common: c } => {
                    common = c;
                    config = merge(c)?;
                    report = report_check_small;
                }
                Command::SimulateOcs { common: c, mode, counts, separation, script, block_masses, gap_mass } => {
                    common = c;
                    config = merge(c)?;
                    set(&mut config.mode, mode.clone());
                    set(&mut config.counts, counts.clone());
                    set(&mut config.separation, *separation);
                    set(&mut config.script, script.clone());
                    set(&mut config.block_masses, block_masses.clone());
                    set(&mut config.gap_mass, *gap_mass);
                    report = report_simulate_ocs;
                }
                Command::SimulateMatching { common: c, instance, generator, offline, online } => {
                    common = c;
                    config = merge(c)?;
                    set(&mut config.instance, instance.clone());
                    set(&mut config.generator, generator.clone());
                    set(&mut config.offline, *offline);
                    set(&mut config.online, *online);
                    report = report_simulate_matching;
                }
                Command::SweepP { common: c, p_min, p_max, p_step } => {
                    common = c;
                    config = merge(c)?;
                    set(&mut config.p_min, *p_min);
                    set(&mut config.p_max, *p_max);
                    set(&mut config.p_step, *p_step);
                    report = report_sweep_p;
                }
                Command::StressNegative { common: c, p2, p3 } => {
                    common = c;
                    config = merge(c)?;
                    set(&mut config.p2, *p2);
                    set(&mut config.p3, *p3);
                    report = report_stress_negative;
                }
                Command::NaTest { common: c } => {
                    common = c;
                    config = merge(c)?;
                    report = report_na_test;
                }
            }
            config.validate()?;
            Ok((report(&config)?, common.out.clone()))
        })();
        match outcome {
            Ok((report, out)) => {
                match out {
                    Some(dir) => {
                        if let Err(e) = report.write(&dir) {
                            eprintln!("error: {e}");
                            return 2;
                        }
                        eprintln!("{}: {}", report.command, if report.pass { "PASS" } else { "FAIL" });
                    }
                    None => print!("{}", report.to_json()),
                }
                if report.pass { 0 } else { 1 }
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 when every requested check passes, 1 when a check
/// fails, 2 on usage or input errors.
pub fn cli(argv: &[String]) -> i32 {
    cli::run(argv)
}
