//! End-to-end acceptance gate. Every criterion prints one PASS/FAIL line and
//! the test fails if any of them fails.

mod common;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use stochastic_privacy::experiments::{
    summarize, summary_median, Experiment, ExperimentConfig, PopulationSource, SweepRow,
};
use stochastic_privacy::population::{Population, SyntheticConfig};
use stochastic_privacy::privacy::audit_frequency;
use stochastic_privacy::seed::rng_from_seed;
use stochastic_privacy::selectors::bounds::GREEDY_RATIO;
use stochastic_privacy::selectors::{
    obfuscation_size, select_greedy, select_opt_bruteforce, select_rand_greedy, select_sp_greedy,
    select_trivial_lottery, Procedure, SelectError, SelectionProblem, SelectionResult,
};
use stochastic_privacy::utility::CoverageUtility;

use common::{mean_sd, uniform_instance};

type Outcome = Result<String, String>;

fn standard_population() -> Arc<Population> {
    static POP: OnceLock<Arc<Population>> = OnceLock::new();
    POP.get_or_init(|| Arc::new(SyntheticConfig::standard(0).generate().unwrap()))
        .clone()
}

fn standard_utility() -> CoverageUtility {
    CoverageUtility::all_candidates(standard_population()).unwrap()
}

fn audit_population() -> Arc<Population> {
    let cfg = SyntheticConfig {
        n_users: 2000,
        ..SyntheticConfig::standard(7)
    };
    Arc::new(cfg.generate().unwrap())
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t <= limit {
        Ok(())
    } else {
        Err(format!("took {t:.1?}, limit {limit:?}"))
    }
}

fn greedy_bound() -> Outcome {
    let start = Instant::now();
    let mut worst = f64::INFINITY;
    for i in 0..100u64 {
        let n = 12 + (i % 7) as usize;
        let u = uniform_instance(n, 100.0, 10_000 + i);
        let p = SelectionProblem::new(&u, 3, 1.0, 0).unwrap();
        let g = select_greedy(&p).unwrap().utility;
        let opt = select_opt_bruteforce(&p).unwrap().utility;
        if g < GREEDY_RATIO * opt - 1e-9 {
            return Err(format!("instance {i}: greedy {g} < (1-1/e) * {opt}"));
        }
        worst = worst.min(g / opt);
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!("100 instances, worst greedy/opt ratio {worst:.4}"))
}

/// Random nested pair `a ⊆ b` of candidate users plus an element outside `b`.
fn nested_triple(rng: &mut impl Rng, n: usize) -> (Vec<usize>, Vec<usize>, usize) {
    let size_b = rng.random_range(0..=20);
    let mut pool: Vec<usize> = rand::seq::index::sample(rng, n, size_b + 1).into_vec();
    let w = pool.pop().unwrap();
    let size_a = rng.random_range(0..=pool.len());
    let a = pool[..size_a].to_vec();
    pool.shuffle(rng);
    (a, pool, w)
}

fn submodularity_fuzz() -> Outcome {
    let start = Instant::now();
    let u = standard_utility();
    let n = u.population().len();
    let mut rng = rng_from_seed(2);
    if u.evaluate(&[]).unwrap() != 0.0 {
        return Err("f(empty) != 0".into());
    }
    for t in 0..1000 {
        let (a, b, w) = nested_triple(&mut rng, n);
        let fa = u.evaluate(&a).unwrap();
        let fb = u.evaluate(&b).unwrap();
        let ga = u.marginal_gain(&a, w).unwrap();
        let gb = u.marginal_gain(&b, w).unwrap();
        if fa < -1e-9 || fb + 1e-9 < fa || gb < -1e-9 || ga + 1e-9 < gb {
            return Err(format!(
                "triple {t}: f(A)={fa} f(A')={fb} gain_A={ga} gain_A'={gb}"
            ));
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok("1000 nested triples on the standard population".into())
}

/// A replacement for `s`: the nearest of a handful of random users, so moves
/// range from tiny to cross-cluster.
fn perturb(rng: &mut impl Rng, pop: &Population, s: usize) -> usize {
    let probes = rng.random_range(1..=64);
    (0..probes)
        .map(|_| rng.random_range(0..pop.len()))
        .min_by(|&x, &y| pop.distance_ix(s, x).total_cmp(&pop.distance_ix(s, y)))
        .unwrap()
}

fn smoothness() -> Outcome {
    let start = Instant::now();
    let u = standard_utility();
    let pop = u.population();
    let mut rng = rng_from_seed(3);
    let mut tightest = f64::INFINITY;
    for t in 0..500 {
        let size = rng.random_range(1..=20);
        let s = rand::seq::index::sample(&mut rng, pop.len(), size).into_vec();
        let moved: Vec<usize> = s.iter().map(|&x| perturb(&mut rng, pop, x)).collect();
        let alpha = s
            .iter()
            .zip(&moved)
            .map(|(&a, &b)| pop.distance_ix(a, b))
            .fold(0.0, f64::max);
        let gap = (u.evaluate_users(&s) - u.evaluate_users(&moved)).abs();
        if gap > alpha + 1e-9 {
            return Err(format!(
                "pair {t}: |f(S) - f(S~)| = {gap} > alpha = {alpha}"
            ));
        }
        if alpha > 0.0 {
            tightest = tightest.min(alpha - gap);
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "500 perturbation pairs, smallest slack {tightest:.3e}"
    ))
}

fn diversification() -> Outcome {
    let start = Instant::now();
    let u = standard_utility();
    let pop = u.population();
    let mut rng = rng_from_seed(4);
    for t in 0..500 {
        let size = rng.random_range(1..=20);
        let mut s = rand::seq::index::sample(&mut rng, pop.len(), size + 1).into_vec();
        let w = s.pop().unwrap();
        let gain = u.marginal_gain(&s, w).unwrap();
        let nearest = s
            .iter()
            .map(|&x| pop.distance_ix(x, w))
            .fold(f64::INFINITY, f64::min);
        if gain > nearest + 1e-9 {
            return Err(format!("pair {t}: marginal {gain} > distance {nearest}"));
        }
    }
    within(Duration::from_secs(60), start)?;
    Ok("500 (S, w) pairs".into())
}

fn privacy_audit() -> Outcome {
    let start = Instant::now();
    let u = CoverageUtility::all_candidates(audit_population()).unwrap();
    let p = SelectionProblem::new(&u, 20, 1.0 / 50.0, 0).unwrap();
    let mut notes = Vec::new();
    for proc in [
        Procedure::Random,
        Procedure::TrivialLottery,
        Procedure::RandGreedy,
        Procedure::SpGreedy,
    ] {
        let rep = audit_frequency(proc, &p, 5000, 1).map_err(|e| e.to_string())?;
        if !rep.adjusted_pass {
            return Err(rep.verdict());
        }
        notes.push(format!("{proc} max {:.4}", rep.worst_frequency));
    }
    let rep = audit_frequency(Procedure::Greedy, &p, 5000, 1).map_err(|e| e.to_string())?;
    if rep.adjusted_pass || rep.worst_frequency != 1.0 {
        return Err(format!(
            "greedy should fail at frequency 1: {}",
            rep.verdict()
        ));
    }
    within(Duration::from_secs(300), start)?;
    Ok(format!("{}; greedy FAIL at 1.0", notes.join(", ")))
}

/// Independent structural check of one obfuscated run.
fn structure_ok(r: &SelectionResult, k: usize) -> Result<(), String> {
    let mut seen = HashSet::new();
    for (i, rec) in r.log.iter().enumerate() {
        let psi = &rec.obfuscation_set;
        if psi.len() != k || !psi.contains(&rec.greedy_pick) || !psi.contains(&rec.final_pick) {
            return Err(format!(
                "iteration {i}: malformed set of {} members",
                psi.len()
            ));
        }
        if !psi.iter().all(|w| seen.insert(*w)) {
            return Err(format!("iteration {i}: sets overlap"));
        }
    }
    Ok(())
}

fn sp_structure(sweeps: &[SweepRow]) -> Outcome {
    let failed = sweeps
        .iter()
        .filter(|r| r.procedure == "sp_greedy" && !r.ok())
        .count();
    if failed > 0 {
        return Err(format!("{failed} sweep rows failed the structural check"));
    }
    let sp_rows = sweeps.iter().filter(|r| r.procedure == "sp_greedy").count();

    let u = CoverageUtility::all_candidates(audit_population()).unwrap();
    for (budget, risk) in [(20, 1.0 / 50.0), (10, 1.0 / 100.0), (40, 1.0 / 50.0)] {
        let k = obfuscation_size(risk);
        for seed in 0..10 {
            let r = select_sp_greedy(&SelectionProblem::new(&u, budget, risk, seed).unwrap())
                .map_err(|e| e.to_string())?;
            structure_ok(&r, k)?;
        }
    }
    // One pick more than the expert pool can host in groups of 50.
    let experts = CoverageUtility::new(audit_population()).unwrap();
    let n_experts = experts.candidates().len();
    let budget = n_experts / 50 + 1;
    match select_sp_greedy(&SelectionProblem::new(&experts, budget, 1.0 / 50.0, 0).unwrap()) {
        Err(SelectError::PoolExhausted { .. }) => {}
        other => return Err(format!("expected pool exhaustion, got {other:?}")),
    }
    Ok(format!(
        "{sp_rows} sweep rows clean, 30 direct runs disjoint, exhaustion aborts at B={budget}"
    ))
}

fn lottery_expectation() -> Outcome {
    let start = Instant::now();
    let u = CoverageUtility::all_candidates(audit_population()).unwrap();
    let risk = 1.0 / 50.0;
    let p = SelectionProblem::new(&u, 20, risk, 0).unwrap();
    let g = select_greedy(&p).unwrap().utility;
    let draws: Vec<f64> = (0..10_000)
        .map(|s| select_trivial_lottery(&p.with_seed(s)).unwrap().utility)
        .collect();
    let (mean, _) = mean_sd(&draws);
    let sigma = g * (risk * (1.0 - risk) / draws.len() as f64).sqrt();
    within(Duration::from_secs(120), start)?;
    if (mean - risk * g).abs() <= 3.0 * sigma {
        Ok(format!(
            "mean {mean:.4} vs r*f(greedy) {:.4}, sigma {sigma:.4}",
            risk * g
        ))
    } else {
        Err(format!("mean {mean} vs {} (sigma {sigma})", risk * g))
    }
}

fn stepwise_loss() -> Outcome {
    let start = Instant::now();
    let u = standard_utility();
    let p = SelectionProblem::new(&u, 50, 1.0 / 100.0, 0).unwrap();
    let r = select_sp_greedy(&p).map_err(|e| e.to_string())?;
    let mut max_loss: f64 = 0.0;
    for (i, rec) in r.log.iter().enumerate() {
        let loss = (rec.marginal_of_greedy_pick - rec.marginal_of_final_pick).abs();
        if loss > rec.obfuscation_radius + 1e-9 {
            return Err(format!(
                "iteration {i}: loss {loss} > radius {}",
                rec.obfuscation_radius
            ));
        }
        max_loss = max_loss.max(loss);
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("50 iterations, largest loss {max_loss:.4}"))
}

fn sweep_config(budgets: Vec<usize>, risks: Vec<f64>) -> ExperimentConfig {
    ExperimentConfig {
        population: PopulationSource::Synthetic(SyntheticConfig::standard(0)),
        budgets,
        risks,
        ..ExperimentConfig::default()
    }
}

fn qualitative_sweeps(budget_rows: &[SweepRow], risk_rows: &[SweepRow], risks: &[f64]) -> Outcome {
    let mut problems = Vec::new();
    let bs = summarize(budget_rows);
    let med = |proc, b, r| summary_median(&bs, proc, b, r).unwrap_or(f64::NAN);
    for b in (1..=10).map(|i| i * 5) {
        let r = 0.01;
        let (rnd, g, rg, sp) = (
            med(Procedure::Random, b, r),
            med(Procedure::Greedy, b, r),
            med(Procedure::RandGreedy, b, r),
            med(Procedure::SpGreedy, b, r),
        );
        if !(rnd <= rg && rg <= g) {
            problems.push(format!("B={b}: random {rnd} rand_greedy {rg} greedy {g}"));
        }
        if !(rnd <= sp && sp <= g) {
            problems.push(format!("B={b}: random {rnd} sp_greedy {sp} greedy {g}"));
        }
        if sp < 0.5 * g {
            problems.push(format!("B={b}: sp_greedy {sp} below half of greedy {g}"));
        }
    }
    let rs = summarize(risk_rows);
    for proc in [Procedure::SpGreedy, Procedure::RandGreedy] {
        // risks are listed from largest to smallest
        for w in risks.windows(2) {
            let hi = summary_median(&rs, proc, 50, w[0]).unwrap_or(f64::NAN);
            let lo = summary_median(&rs, proc, 50, w[1]).unwrap_or(f64::NAN);
            if !(lo <= hi * 1.02) {
                problems.push(format!(
                    "{proc}: r={} gives {lo}, r={} gives {hi}",
                    w[1], w[0]
                ));
            }
        }
    }
    if problems.is_empty() {
        Ok(format!(
            "orderings hold at all 10 budgets, risk curves monotone within 2%; B=50 medians greedy {:.3} sp_greedy {:.3} rand_greedy {:.3} random {:.3}",
            med(Procedure::Greedy, 50, 0.01),
            med(Procedure::SpGreedy, 50, 0.01),
            med(Procedure::RandGreedy, 50, 0.01),
            med(Procedure::Random, 50, 0.01),
        ))
    } else {
        Err(problems.join("; "))
    }
}

fn cli(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sprivacy"))
        .args(args)
        .env("SP_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    match out.status.code() {
        Some(0) | Some(3) => Ok(()),
        c => Err(format!(
            "{args:?} exited {c:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        )),
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut snaps = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "1"), ("c", "2"), ("d", "4")] {
        let d = root.path().join(run);
        let s = |p: &Path| p.to_str().unwrap().to_string();
        let pop = s(&d.join("pop.csv"));
        let out = s(&d);
        cli(
            &[
                "gen",
                "--n-users",
                "800",
                "--n-clusters",
                "5",
                "--cluster-spread",
                "5",
                "--seed",
                "9",
                "--out",
                &pop,
            ],
            threads,
        )?;
        cli(
            &[
                "sweep-budget",
                "--pop",
                &pop,
                "--b",
                "2:8:2",
                "--r",
                "1/100",
                "--repeats",
                "3",
                "--seed",
                "4",
                "--out",
                &out,
            ],
            threads,
        )?;
        cli(
            &[
                "sweep-risk",
                "--pop",
                &pop,
                "--b",
                "4",
                "--r",
                "1/10,1/50,1/100",
                "--repeats",
                "3",
                "--seed",
                "4",
                "--out",
                &out,
            ],
            threads,
        )?;
        cli(
            &[
                "trace-obfuscation",
                "--pop",
                &pop,
                "--b",
                "6",
                "--r",
                "1/50",
                "--seed",
                "4",
                "--out",
                &out,
            ],
            threads,
        )?;
        cli(
            &[
                "audit",
                "--pop",
                &pop,
                "--proc",
                "sp_greedy",
                "--b",
                "4",
                "--r",
                "1/100",
                "--trials",
                "1000",
                "--seed",
                "4",
                "--out",
                &out,
            ],
            threads,
        )?;
        cli(&["plot", "--in", &out, "--out", &out], threads)?;
        snaps.push(snapshot(&d));
    }
    let files = snaps[0].len();
    if snaps.iter().all(|s| *s == snaps[0]) {
        Ok(format!(
            "{files} output files byte-identical across 4 runs with 1, 2 and 4 threads"
        ))
    } else {
        let names: Vec<_> = snaps[0]
            .iter()
            .filter(|(n, b)| {
                snaps
                    .iter()
                    .any(|s| s.iter().find(|(m, _)| m == n).map(|(_, c)| c) != Some(b))
            })
            .map(|(n, _)| n.clone())
            .collect();
        Err(format!("outputs differ: {names:?}"))
    }
}

fn degenerate() -> Outcome {
    let u = standard_utility();
    for seed in 0..3 {
        let p = SelectionProblem::new(&u, 20, 1.0, seed).unwrap();
        let g = select_greedy(&p).unwrap().selected;
        if select_sp_greedy(&p).unwrap().selected != g {
            return Err(format!("seed {seed}: sp_greedy differs from greedy at r=1"));
        }
        if select_rand_greedy(&p).unwrap().selected != g {
            return Err(format!(
                "seed {seed}: rand_greedy differs from greedy at r=1"
            ));
        }
    }
    let small = uniform_instance(14, 50.0, 77);
    let mut checked = 0;
    for risk in [1.0, 0.5] {
        let k = obfuscation_size(risk);
        let p = SelectionProblem::new(&small, 14, risk, 5).unwrap();
        for proc in Procedure::ALL {
            // Feasible under r: B must fit the privacy capacity and, for
            // obfuscation, B sets of size ceil(1/r) must fit the pool.
            let feasible = !proc.respects_privacy()
                || (p.privacy_capacity() >= 14 && (proc != Procedure::SpGreedy || 14 * k <= 14));
            if !feasible {
                continue;
            }
            let mut got = proc.run(&p).map_err(|e| format!("{proc}: {e}"))?.selected;
            got.sort_unstable();
            if got != (0..14).collect::<Vec<_>>() {
                return Err(format!("{proc} at r={risk} did not return every candidate"));
            }
            checked += 1;
        }
    }
    Ok(format!(
        "r=1 identical lists on 3 seeds; {checked} full-budget runs return every candidate"
    ))
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, outcome: Outcome| {
        let line = match &outcome {
            Ok(m) => format!("PASS criterion {n:>2} {name}: {m}"),
            Err(m) => format!("FAIL criterion {n:>2} {name}: {m}"),
        };
        // Written straight to stdout so the lines show without --nocapture.
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        results.push((n, name, outcome));
    };

    report(1, "greedy approximation", greedy_bound());
    report(2, "submodularity fuzz", submodularity_fuzz());
    report(3, "smoothness", smoothness());
    report(4, "diversification", diversification());
    report(5, "privacy audit", privacy_audit());

    let start = Instant::now();
    let risks = vec![1.0 / 10.0, 1.0 / 20.0, 1.0 / 50.0, 1.0 / 100.0, 1.0 / 200.0];
    let budget_rows = Experiment::new(sweep_config((1..=10).map(|i| i * 5).collect(), vec![0.01]))
        .and_then(|e| e.run_budget_sweep());
    let risk_rows =
        Experiment::new(sweep_config(vec![50], risks.clone())).and_then(|e| e.run_risk_sweep());
    let sweep_time = start.elapsed();

    match (&budget_rows, &risk_rows) {
        (Ok(b), Ok(r)) => {
            let all: Vec<SweepRow> = b.iter().chain(r).cloned().collect();
            report(6, "obfuscation structure", sp_structure(&all));
        }
        _ => report(6, "obfuscation structure", Err("sweeps did not run".into())),
    }
    report(7, "lottery expectation", lottery_expectation());
    report(8, "stepwise obfuscation loss", stepwise_loss());
    let c9 = match (&budget_rows, &risk_rows) {
        (Ok(b), Ok(r)) if sweep_time <= Duration::from_secs(600) => {
            qualitative_sweeps(b, r, &risks)
        }
        (Ok(_), Ok(_)) => Err(format!("sweeps took {sweep_time:.1?}, limit 10 min")),
        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
    };
    report(9, "qualitative sweeps", c9);
    report(10, "determinism", determinism());
    report(11, "degenerate equivalences", degenerate());

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, _, o)| o.is_err())
        .map(|(n, name, _)| format!("{n} ({name})"))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
