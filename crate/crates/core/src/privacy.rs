//! Per-user exposure accounting and Monte-Carlo audits of selection
//! frequencies.
//!
//! Exposures from independent events compose as `1 - prod(1 - p_i)`. A user's
//! guarantee holds while `r_w - (1 - (1 - r_es) * (1 - r_ss)) >= 0`; the
//! left-hand side is the user's remaining sampling budget.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use rand::seq::index;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::population::Population;
use crate::seed::{derive_seed, rng_from_seed};
use crate::selectors::{Procedure, SelectError, SelectionProblem};

/// Smallest trial count accepted by [`audit_frequency`].
pub const MIN_AUDIT_TRIALS: usize = 1000;

/// Width of the per-user confidence bound, in standard deviations.
pub const AUDIT_SIGMAS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum PrivacyError {
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("user `{0}` is already registered")]
    DuplicateUser(String),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
    #[error("sample of {sample} exceeds population of {population}")]
    SampleTooLarge { sample: usize, population: usize },
    #[error("audit needs at least {MIN_AUDIT_TRIALS} trials, got {0}")]
    TooFewTrials(usize),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Explorative,
    Selective,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureRecord {
    pub user_id: String,
    /// Promised risk `r_w`.
    pub promised: f64,
    pub explorative: f64,
    pub selective: f64,
}

impl ExposureRecord {
    /// Probability of being exposed in at least one phase.
    pub fn combined(&self) -> f64 {
        1.0 - (1.0 - self.explorative) * (1.0 - self.selective)
    }

    /// Remaining sampling budget; negative means the guarantee is broken.
    pub fn remaining_budget(&self) -> f64 {
        self.promised - self.combined()
    }
}

#[derive(Debug, Clone, Default)]
pub struct PrivacyLedger {
    records: Vec<ExposureRecord>,
    by_id: HashMap<String, usize>,
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(PrivacyError::ProbabilityOutOfRange(p))
    }
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// One record per user, promised risk taken from the population.
    pub fn from_population(pop: &Population) -> Self {
        let mut ledger = Self::new();
        for u in pop.users() {
            ledger
                .register(&u.id, u.privacy_risk)
                .expect("population ids are unique and risks validated");
        }
        ledger
    }

    pub fn register(&mut self, id: &str, promised: f64) -> Result<()> {
        check_probability(promised)?;
        if self.by_id.contains_key(id) {
            return Err(PrivacyError::DuplicateUser(id.to_string()));
        }
        self.by_id.insert(id.to_string(), self.records.len());
        self.records.push(ExposureRecord {
            user_id: id.to_string(),
            promised,
            explorative: 0.0,
            selective: 0.0,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ExposureRecord] {
        &self.records
    }

    pub fn record(&self, id: &str) -> Option<&ExposureRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Composes an independent exposure of probability `prob` into `phase`.
    pub fn record_exposure(&mut self, id: &str, phase: Phase, prob: f64) -> Result<()> {
        check_probability(prob)?;
        let &i = self
            .by_id
            .get(id)
            .ok_or_else(|| PrivacyError::UnknownUser(id.to_string()))?;
        let rec = &mut self.records[i];
        let slot = match phase {
            Phase::Explorative => &mut rec.explorative,
            Phase::Selective => &mut rec.selective,
        };
        *slot = 1.0 - (1.0 - *slot) * (1.0 - prob);
        Ok(())
    }

    pub fn combined(&self, id: &str) -> Result<f64> {
        self.record(id)
            .map(ExposureRecord::combined)
            .ok_or_else(|| PrivacyError::UnknownUser(id.to_string()))
    }

    /// Users whose combined exposure exceeds their promised risk, in
    /// registration order.
    pub fn check_guarantee(&self) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.remaining_budget() < 0.0)
            .map(|r| r.user_id.clone())
            .collect()
    }

    /// Explorative sampling: draws `size` users uniformly without replacement
    /// and charges every user of `pop` the inclusion probability `size / |W|`.
    pub fn explore(&mut self, pop: &Population, size: usize, seed: u64) -> Result<Vec<usize>> {
        if size > pop.len() {
            return Err(PrivacyError::SampleTooLarge {
                sample: size,
                population: pop.len(),
            });
        }
        let prob = size as f64 / pop.len().max(1) as f64;
        for u in pop.users() {
            self.record_exposure(&u.id, Phase::Explorative, prob)?;
        }
        let mut rng = rng_from_seed(seed);
        let mut picked = index::sample(&mut rng, pop.len(), size).into_vec();
        picked.sort_unstable();
        Ok(picked)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub user_id: String,
    pub frequency: f64,
}

/// Empirical selection frequencies of a procedure over many seeded trials.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub procedure: Procedure,
    pub trials: usize,
    pub risk: f64,
    /// One entry per population user, in pool order.
    pub entries: Vec<AuditEntry>,
    pub worst_user: String,
    pub worst_frequency: f64,
    /// `r + 3 * sqrt(r (1 - r) / M)`
    pub ci_bound: f64,
    pub pass: bool,
    /// Bound after a Bonferroni correction over all users tested.
    pub adjusted_bound: f64,
    pub adjusted_pass: bool,
}

/// Raw per-user upper confidence bound.
pub fn ci_bound(risk: f64, trials: usize) -> f64 {
    risk + AUDIT_SIGMAS * binomial_sd(risk, trials)
}

/// Upper bound whose family-wise false-alarm rate over `users` tests matches
/// the per-user rate of the raw bound.
pub fn bonferroni_bound(risk: f64, trials: usize, users: usize) -> f64 {
    let normal = Normal::standard();
    let tail = 1.0 - normal.cdf(AUDIT_SIGMAS);
    let z = normal.inverse_cdf(1.0 - tail / users.max(1) as f64);
    risk + z * binomial_sd(risk, trials)
}

fn binomial_sd(risk: f64, trials: usize) -> f64 {
    (risk * (1.0 - risk) / trials as f64).sqrt()
}

impl AuditReport {
    fn from_counts(
        procedure: Procedure,
        pop: &Population,
        risk: f64,
        trials: usize,
        counts: &[u32],
    ) -> Self {
        let entries: Vec<AuditEntry> = counts
            .iter()
            .enumerate()
            .map(|(ix, &c)| AuditEntry {
                user_id: pop.id(ix).to_string(),
                frequency: c as f64 / trials as f64,
            })
            .collect();
        let worst = (0..counts.len())
            .max_by(|&a, &b| {
                counts[a]
                    .cmp(&counts[b])
                    .then(pop.id_rank(b).cmp(&pop.id_rank(a)))
            })
            .unwrap_or(0);
        let worst_frequency = entries.get(worst).map_or(0.0, |e| e.frequency);
        let ci_bound = ci_bound(risk, trials);
        let adjusted_bound = bonferroni_bound(risk, trials, pop.len());
        Self {
            procedure,
            trials,
            risk,
            worst_user: entries
                .get(worst)
                .map(|e| e.user_id.clone())
                .unwrap_or_default(),
            worst_frequency,
            entries,
            ci_bound,
            pass: worst_frequency <= ci_bound,
            adjusted_bound,
            adjusted_pass: worst_frequency <= adjusted_bound,
        }
    }

    /// `user_id,frequency,bound,violation` against the raw bound.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["user_id", "frequency", "bound", "violation"])?;
        let bound = self.ci_bound.to_string();
        for e in &self.entries {
            let violation = if e.frequency > self.ci_bound {
                "1"
            } else {
                "0"
            };
            wtr.write_record([
                e.user_id.as_str(),
                &e.frequency.to_string(),
                &bound,
                violation,
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// One-line verdict. The leading token follows the Bonferroni-adjusted
    /// test; the raw verdict is appended.
    pub fn verdict(&self) -> String {
        self.to_string()
    }
}

fn word(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} procedure={} worst_user={} frequency={} bound={} raw={} raw_bound={} trials={} risk={}",
            word(self.adjusted_pass),
            self.procedure,
            self.worst_user,
            self.worst_frequency,
            self.adjusted_bound,
            word(self.pass),
            self.ci_bound,
            self.trials,
            self.risk,
        )
    }
}

/// Runs `trials` independently seeded selections and counts how often each
/// user is picked. Trials run in parallel; counts merge by addition, so the
/// report depends only on `base_seed`.
pub fn audit_frequency(
    procedure: Procedure,
    problem: &SelectionProblem,
    trials: usize,
    base_seed: u64,
) -> Result<AuditReport> {
    if trials < MIN_AUDIT_TRIALS {
        return Err(PrivacyError::TooFewTrials(trials));
    }
    let pop = problem.population();
    let n = pop.len();
    let counts = (0..trials as u64)
        .into_par_iter()
        .try_fold(
            || vec![0u32; n],
            |mut acc, t| {
                let run = procedure.run(&problem.with_seed(derive_seed(base_seed, &[t])))?;
                for &w in &run.selected {
                    acc[w] += 1;
                }
                Ok::<_, SelectError>(acc)
            },
        )
        .try_reduce(
            || vec![0u32; n],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    Ok(AuditReport::from_counts(
        procedure,
        pop,
        problem.risk(),
        trials,
        &counts,
    ))
}
