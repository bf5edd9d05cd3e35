//! Acceptance gate: one line per criterion, nonzero exit if any fails.

use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use multiway_ocs::harness::{
    benchmark_instances, mc_matching, mc_never_win, mc_tournament_consistency, negative_arith, quantile_sample,
    report_simulate_matching, report_simulate_ocs, strength_marginal, ExperimentConfig, SequenceSpec,
};
use multiway_ocs::matching::{opt_offline, plan_matching, Instance};
use multiway_ocs::ocs::{mix_seed, OcsModel, DEFAULT_CELLS};
use multiway_ocs::ratios::{
    check_conditions_with, gamma_continuous, gamma_discrete, gamma_fahrbach, DiscreteF, DualCurves,
};
use multiway_ocs::win_distribution::{build_win_model, check_small, compute_f, SeedParams, WinModel};
use multiway_ocs::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIGMA: f64 = 3.0;
const SEED: u64 = 20_240_601;
const TABLE_F: [f64; 11] = [1.0, 0.833, 0.677, 0.54, 0.426, 0.333, 0.260, 0.201, 0.156, 0.121, 0.093];

struct Context {
    model: WinModel,
    ocs: Arc<OcsModel>,
    curves: DualCurves,
}

fn table_model() -> Result<WinModel> {
    build_win_model(SeedParams::new(0.48, 6, 30)?)
}

fn criterion_1() -> Result<(bool, String)> {
    let start = Instant::now();
    let table = compute_f(&table_model()?, 10)?;
    let elapsed = start.elapsed().as_secs_f64();
    let worst = table.head.iter().zip(TABLE_F).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((worst <= 0.0015 && elapsed < 1.0, format!("max |F - table| = {worst:.2e}, {elapsed:.3}s")))
}

fn criterion_2() -> Result<(bool, String)> {
    let start = Instant::now();
    let f = DiscreteF::from_table(&compute_f(&table_model()?, 10)?);
    let gamma = gamma_discrete(&f);
    let curves = DualCurves::new(&f);
    let report = check_conditions_with(&f, &curves);
    let elapsed = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let ode_ok = report.check("a_ode").is_some_and(|c| c.pass);
    let pass = gamma >= 0.5368
        && failed.is_empty()
        && ode_ok
        && report.m_bound_rhs >= 6.0
        && report.r_bound >= 6.0
        && elapsed < 10.0;
    Ok((
        pass,
        format!(
            "Gamma = {gamma:.10}, m-bound RHS = {:.4}, r-bound = {:.4}, {} checks, failed {:?}, {elapsed:.2}s",
            report.m_bound_rhs,
            report.r_bound,
            report.checks.len(),
            failed
        ),
    ))
}

fn criterion_3() -> Result<(bool, String)> {
    let fahrbach_one = gamma_fahrbach(1.0)?;
    let fahrbach_third = gamma_fahrbach(1.0 / 3.0)?;
    let exp = gamma_continuous(&|x: f64| (-x).exp())?;
    let tent = gamma_continuous(&|x: f64| (1.0 - x).max(0.0))?;
    let mut worst_trivial: f64 = 0.0;
    for m in 2..=8 {
        worst_trivial = worst_trivial.max((gamma_discrete(&DiscreteF::trivial(m)) - 0.5).abs());
    }
    let pass = fahrbach_one == 5.0 / 9.0
        && fahrbach_third < 0.5239
        && (exp - 0.5).abs() <= 1e-9
        && (tent - (1.0 - (-1.0f64).exp())).abs() <= 1e-9
        && worst_trivial <= 1e-12;
    Ok((
        pass,
        format!(
            "fahrbach(1) = {fahrbach_one}, fahrbach(1/3) = {fahrbach_third:.6}, exp err {:.1e}, tent err {:.1e}, trivial err {worst_trivial:.1e}",
            (exp - 0.5).abs(),
            (tent - (1.0 - (-1.0f64).exp())).abs()
        ),
    ))
}

fn criterion_4() -> Result<(bool, String)> {
    let start = Instant::now();
    let high = table_model()?;
    let low = build_win_model(SeedParams::new(0.04, 6, 30)?)?;
    let high_certs = (1..6).map(|r| check_small(&high, r)).collect::<Result<Vec<_>>>()?;
    let low_certs = (1..6).map(|r| check_small(&low, r)).collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let high_ok = high_certs.iter().all(|c| c.holds);
    let low_fails = low_certs.iter().any(|c| !c.holds);
    let high_min = high_certs.iter().map(|c| c.min_gap).fold(f64::INFINITY, f64::min);
    let low_min = low_certs.iter().map(|c| c.min_gap).fold(f64::INFINITY, f64::min);
    Ok((
        high_ok && low_fails && elapsed < 5.0,
        format!(
            "p=0.48 holds for all r: {high_ok} (min g {high_min:.2e}); p=0.04 fails for some r: {low_fails} (min g {low_min:.2e}); {elapsed:.2}s"
        ),
    ))
}

fn criterion_5(ctx: &Context) -> Result<(bool, String)> {
    let start = Instant::now();
    let table = compute_f(&ctx.model, 10)?;
    let scripts: [(&str, Vec<usize>); 4] =
        [("(1)", vec![1]), ("(3)", vec![3]), ("(2,2)", vec![2, 2]), ("(6)", vec![6])];
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (name, counts)) in scripts.iter().enumerate() {
        let spec = SequenceSpec::from_counts(6, counts, 5);
        let res = mc_never_win(&spec, &ctx.ocs, &table, 100_000, mix_seed(SEED, 5_000 + k as u64), SIGMA)?;
        pass &= res.pass;
        parts.push(format!("{name} {:.4} <= {:.4}", res.estimate, res.bound));
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 120.0;
    Ok((pass, format!("{}; {elapsed:.1}s", parts.join(", "))))
}

fn criterion_6(ctx: &Context) -> Result<(bool, String)> {
    let mut rows = 0;
    let mut failed = Vec::new();
    let mut targets: Vec<(usize, f64)> = ctx.ocs.coupling(1).source.values().iter().map(|&w| (1, w)).collect();
    for r in [2, 3] {
        targets.extend(quantile_sample(&ctx.ocs, r, 8).into_iter().map(|w| (r, w)));
    }
    for (k, &(r, w)) in targets.iter().enumerate() {
        let row = mc_tournament_consistency(&ctx.ocs, r, w, 100_000, mix_seed(SEED, 6_000 + k as u64), SIGMA)?;
        rows += 1;
        if !row.pass {
            failed.push(format!("r={r} w={w:.4} rate={:.4}", row.estimate));
        }
    }
    let mut ks = Vec::new();
    for r in 1..6 {
        let res = strength_marginal(&ctx.ocs, r, 100_000, mix_seed(SEED, 6_500 + r as u64), SIGMA)?;
        if !res.pass {
            failed.push(format!("KS r={r}"));
        }
        ks.push(format!("{:.4}/{:.4}", res.statistic, res.threshold));
    }
    Ok((
        failed.is_empty(),
        format!("{rows} pinned values, KS stat/threshold per r [{}], failures {:?}", ks.join(" "), failed),
    ))
}

fn criterion_7(ctx: &Context) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(SEED, 7));
    let mut instances: Vec<Instance> = (0..50)
        .map(|_| {
            let n = rng.random_range(1..=8);
            let m = rng.random_range(1..=20);
            let density = rng.random_range(0.2..0.9);
            Instance::random_uniform(&mut rng, n, m, density)
        })
        .collect();
    instances.push(Instance::upper_triangular(6, 12));
    instances.push(Instance::upper_triangular(8, 20));
    instances.push(Instance::duplicate_heavy(&mut rng, 6, 15));
    instances.push(Instance::duplicate_heavy(&mut rng, 8, 20));
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    let mut min_slack = f64::INFINITY;
    for inst in &instances {
        let plan = plan_matching(inst, &ctx.curves, 6.0)?;
        violations += plan.violations.len();
        if !plan.steps.is_empty() {
            min_gap = min_gap.min(plan.min_step_gap);
            min_slack = min_slack.min(plan.min_final_slack);
        }
    }
    Ok((
        violations == 0,
        format!(
            "{} instances, {violations} violations, min step dP-dD = {min_gap:.2e}, min final slack = {min_slack:.2e}",
            instances.len()
        ),
    ))
}

fn brute_force(inst: &Instance) -> f64 {
    fn go(inst: &Instance, j: usize, used: &mut [bool]) -> f64 {
        if j == inst.num_online() {
            return 0.0;
        }
        let mut best = go(inst, j + 1, used);
        for i in 0..inst.num_offline() {
            if !used[i] && inst.weights[j][i] > 0.0 {
                used[i] = true;
                best = best.max(inst.weights[j][i] + go(inst, j + 1, used));
                used[i] = false;
            }
        }
        best
    }
    go(inst, 0, &mut vec![false; inst.num_offline()])
}

fn criterion_8(ctx: &Context) -> Result<(bool, String)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(SEED, 8));
    let mut opt_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=6);
        let inst = Instance::random_uniform(&mut rng, n, m, 0.6);
        opt_ok &= (opt_offline(&inst)? - brute_force(&inst)).abs() < 1e-12;
    }
    let mut pass = opt_ok;
    let mut parts = Vec::new();
    for (k, (name, inst)) in benchmark_instances(SEED).into_iter().enumerate() {
        let run = mc_matching(&name, &inst, &ctx.curves, &ctx.ocs, 10_000, mix_seed(SEED, 8_000 + k as u64), SIGMA)?;
        let s = &run.summary;
        pass &= s.pass;
        parts.push(format!("{name} {:.3}/{:.2} = {:.3}", s.mean, s.opt, s.ratio));
    }
    let elapsed = start.elapsed().as_secs_f64();
    pass &= elapsed < 600.0;
    Ok((pass, format!("OPT vs exhaustive ok: {opt_ok}; {}; {elapsed:.1}s", parts.join(", "))))
}

fn criterion_9() -> Result<(bool, String)> {
    let boundary = negative_arith(2.0 / 3.0, 0.5)?;
    let a = negative_arith(0.7, 0.5)?;
    let b = negative_arith(0.7, 0.2)?;
    let examples = (boundary.violation_a - 1.0 / 6.0).abs() < 1e-15
        && (boundary.violation_b - 1.0 / 6.0).abs() < 1e-15
        && !boundary.contradiction
        && (a.violation_a - 0.175).abs() < 1e-15
        && a.contradiction
        && (b.violation_b - 0.28).abs() < 1e-15
        && b.contradiction;
    // Exact region on a rational grid: p2 = i/N, p3 = j/N.
    let n = 240u64;
    let mut mismatches = 0;
    for i in 0..=n {
        for j in 0..=n {
            let res = negative_arith(i as f64 / n as f64, j as f64 / n as f64)?;
            let expected = 3 * i > 2 * n && 3 * i * j.max(n - j) > n * n;
            mismatches += (res.contradiction != expected) as u32;
        }
    }
    Ok((examples && mismatches == 0, format!("examples ok: {examples}; grid mismatches {mismatches}")))
}

fn criterion_10() -> Result<(bool, String)> {
    let ocs_config = ExperimentConfig { seed: 99, trials: Some(2_000), counts: Some(vec![2, 2]), ..Default::default() };
    let matching_config = ExperimentConfig { seed: 99, trials: Some(300), ..Default::default() };
    let same_ocs = report_simulate_ocs(&ocs_config)?.to_json() == report_simulate_ocs(&ocs_config)?.to_json();
    let same_matching =
        report_simulate_matching(&matching_config)?.to_json() == report_simulate_matching(&matching_config)?.to_json();

    let dir = tempfile::tempdir().map_err(|e| multiway_ocs::Error::Malformed(e.to_string()))?;
    let run = |name: &str| -> Option<Vec<u8>> {
        let out = dir.path().join(name);
        Command::new(env!("CARGO_BIN_EXE_ocs"))
            .args(["simulate-ocs", "--seed", "5", "--trials", "3000", "--counts", "3", "--out"])
            .arg(&out)
            .status()
            .ok()?;
        std::fs::read(out.join("report.json")).ok()
    };
    let (first, second) = (run("a"), run("b"));
    let same_cli = first.is_some() && first == second;
    Ok((
        same_ocs && same_matching && same_cli,
        format!("library ocs {same_ocs}, library matching {same_matching}, cli files {same_cli}"),
    ))
}

fn main() {
    let start = Instant::now();
    let ctx = (|| -> Result<Context> {
        let model = table_model()?;
        let ocs = Arc::new(OcsModel::new(model.clone(), DEFAULT_CELLS)?);
        let curves = DualCurves::new(&DiscreteF::from_table(&compute_f(&model, 10)?));
        Ok(Context { model, ocs, curves })
    })()
    .expect("shared fixtures build");

    type Check<'a> = Box<dyn Fn() -> Result<(bool, String)> + 'a>;
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "F-table reproduction", Box::new(criterion_1)),
        (2, "headline ratio and side conditions", Box::new(criterion_2)),
        (3, "closed-form anchors", Box::new(criterion_3)),
        (4, "sufficiency certificate", Box::new(criterion_4)),
        (5, "never-win guarantee", Box::new(|| criterion_5(&ctx))),
        (6, "tournament consistency", Box::new(|| criterion_6(&ctx))),
        (7, "step-wise duality", Box::new(|| criterion_7(&ctx))),
        (8, "end-to-end ratio", Box::new(|| criterion_8(&ctx))),
        (9, "impossibility arithmetic", Box::new(criterion_9)),
        (10, "reproducibility", Box::new(criterion_10)),
    ];

    let mut failures = 0;
    for (id, name, check) in &criteria {
        let (pass, detail) = match check() {
            Ok(outcome) => outcome,
            Err(e) => (false, format!("error: {e}")),
        };
        failures += (!pass) as u32;
        println!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!(
        "acceptance: {} of {} criteria pass ({:.1}s)",
        criteria.len() as u32 - failures,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
