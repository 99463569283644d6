mod common;

use proptest::prelude::*;

use stochastic_privacy::privacy::{
    audit_frequency, bonferroni_bound, ci_bound, Phase, PrivacyError, PrivacyLedger,
    MIN_AUDIT_TRIALS,
};
use stochastic_privacy::selectors::{Procedure, SelectionProblem};

use common::uniform_instance;

fn phase(b: bool) -> Phase {
    if b {
        Phase::Explorative
    } else {
        Phase::Selective
    }
}

proptest! {
    #[test]
    fn ledger_matches_product_formula(events in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 0..20)) {
        let mut l = PrivacyLedger::new();
        l.register("w", 0.5).unwrap();
        let mut keep = 1.0;
        for &(e, p) in &events {
            l.record_exposure("w", phase(e), p).unwrap();
            keep *= 1.0 - p;
        }
        prop_assert!((l.combined("w").unwrap() - (1.0 - keep)).abs() <= 1e-12);
    }

    #[test]
    fn ledger_is_order_free_and_monotone(events in prop::collection::vec((any::<bool>(), 0.0f64..=1.0), 1..20)) {
        let mut fwd = PrivacyLedger::new();
        let mut rev = PrivacyLedger::new();
        fwd.register("w", 0.1).unwrap();
        rev.register("w", 0.1).unwrap();
        let mut last = 0.0;
        for &(e, p) in &events {
            fwd.record_exposure("w", phase(e), p).unwrap();
            let now = fwd.combined("w").unwrap();
            prop_assert!(now + 1e-15 >= last);
            last = now;
        }
        for &(e, p) in events.iter().rev() {
            rev.record_exposure("w", phase(e), p).unwrap();
        }
        prop_assert!((fwd.combined("w").unwrap() - rev.combined("w").unwrap()).abs() <= 1e-12);
        let broken = fwd.combined("w").unwrap() > 0.1;
        prop_assert_eq!(fwd.check_guarantee().len(), usize::from(broken));
    }
}

#[test]
fn exploration_charges_inclusion_probability() {
    let u = uniform_instance(50, 10.0, 2);
    let pop = u.population();
    let mut l = PrivacyLedger::from_population(pop);
    let mut picked = l.explore(pop, 5, 9).unwrap();
    assert_eq!(picked.len(), 5);
    picked.dedup();
    assert_eq!(picked.len(), 5);
    for rec in l.records() {
        assert!((rec.explorative - 0.1).abs() < 1e-12);
        assert_eq!(rec.selective, 0.0);
    }
    assert!(matches!(
        l.explore(pop, 51, 0),
        Err(PrivacyError::SampleTooLarge { .. })
    ));
}

#[test]
fn audit_separates_private_and_greedy() {
    let u = uniform_instance(200, 100.0, 17);
    let risk = 0.05;
    let p = SelectionProblem::new(&u, 5, risk, 0).unwrap();
    for proc in [
        Procedure::Random,
        Procedure::RandGreedy,
        Procedure::SpGreedy,
        Procedure::TrivialLottery,
    ] {
        let rep = audit_frequency(proc, &p, 2000, 3).unwrap();
        assert!(rep.adjusted_pass, "{}", rep.verdict());
        assert!(rep.verdict().starts_with("PASS"));
        let total: f64 = rep.entries.iter().map(|e| e.frequency).sum();
        assert!(total <= 5.0 + 1e-9);
    }
    let rep = audit_frequency(Procedure::Greedy, &p, 2000, 3).unwrap();
    assert_eq!(rep.worst_frequency, 1.0);
    assert!(!rep.adjusted_pass && !rep.pass);
    assert!(rep.verdict().starts_with("FAIL"));
}

#[test]
fn random_frequency_is_budget_over_population() {
    let u = uniform_instance(100, 10.0, 4);
    let p = SelectionProblem::new(&u, 4, 0.1, 0).unwrap();
    let trials = 4000;
    let rep = audit_frequency(Procedure::Random, &p, trials, 8).unwrap();
    let q = 0.04;
    let sd = (q * (1.0 - q) / trials as f64).sqrt();
    let mean = rep.entries.iter().map(|e| e.frequency).sum::<f64>() / rep.entries.len() as f64;
    assert!((mean - q).abs() < 1e-12);
    let z = bonferroni_bound(q, trials, 100) - q;
    for e in &rep.entries {
        assert!(
            (e.frequency - q).abs() <= z + sd,
            "{} at {}",
            e.user_id,
            e.frequency
        );
    }
}

#[test]
fn audit_is_thread_count_independent() {
    let u = uniform_instance(120, 50.0, 6);
    let p = SelectionProblem::new(&u, 3, 0.1, 0).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| audit_frequency(Procedure::SpGreedy, &p, MIN_AUDIT_TRIALS, 77).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.entries, b.entries);
    assert_eq!(a.verdict(), b.verdict());
}

#[test]
fn audit_csv_schema() {
    let u = uniform_instance(30, 10.0, 6);
    let p = SelectionProblem::new(&u, 2, 0.2, 0).unwrap();
    let rep = audit_frequency(Procedure::Random, &p, MIN_AUDIT_TRIALS, 1).unwrap();
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("user_id,frequency,bound,violation"));
    assert_eq!(lines.count(), 30);
    assert!((rep.ci_bound - ci_bound(0.2, MIN_AUDIT_TRIALS)).abs() < 1e-15);
    assert!(rep.adjusted_bound > rep.ci_bound);
}

#[test]
fn audit_rejects_small_trial_counts() {
    let u = uniform_instance(30, 10.0, 6);
    let p = SelectionProblem::new(&u, 2, 0.2, 0).unwrap();
    assert!(matches!(
        audit_frequency(Procedure::Random, &p, MIN_AUDIT_TRIALS - 1, 0),
        Err(PrivacyError::TooFewTrials(_))
    ));
}
