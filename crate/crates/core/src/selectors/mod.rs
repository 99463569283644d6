//! Selection procedures under a cardinality budget and a uniform privacy risk.
//!
//! | procedure         | privacy bound | notes                                   |
//! |-------------------|---------------|-----------------------------------------|
//! | `random`          | B/|W'| <= r   | uniform draw without replacement        |
//! | `greedy`          | none          | argmax marginal gain, B times           |
//! | `trivial_lottery` | r             | greedy's set with probability r, else ∅ |
//! | `rand_greedy`     | r             | Bernoulli(r) subsample, then greedy     |
//! | `sp_greedy`       | r             | greedy pick obfuscated among ceil(1/r) nearest |
//! | `opt`             | none          | exhaustive search, desk scale only      |
//!
//! Every procedure is a pure function of the problem and its seed, and ties
//! are always broken towards the lowest user id.

pub mod bounds;
mod engine;

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::index;
use rand::Rng;
use thiserror::Error;

pub use engine::GreedyEngine;
use engine::Picker;

use crate::population::Population;
use crate::seed::rng_from_seed;
use crate::utility::{CoverageUtility, IncrementalObjective, UtilityError};

/// Slack for the floating-point products `|W| * r` and `1 / r`.
const RATE_EPS: f64 = 1e-9;

/// Upper limits for the exhaustive oracle.
pub const OPT_MAX_CANDIDATES: usize = 22;
pub const OPT_MAX_SUBSETS: u128 = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("budget {budget} exceeds the candidate pool of {pool}")]
    BudgetExceedsPool { budget: usize, pool: usize },
    #[error("budget {budget} exceeds floor(|W| * r) = {capacity}")]
    BudgetExceedsPrivacy { budget: usize, capacity: usize },
    #[error(
        "pool exhausted after {picked} picks: {remaining} users left, obfuscation needs {needed}"
    )]
    PoolExhausted {
        picked: usize,
        remaining: usize,
        needed: usize,
    },
    #[error(
        "instance too large for exhaustive search: {candidates} candidates, {subsets} subsets"
    )]
    InstanceTooLarge { candidates: usize, subsets: u128 },
    #[error("privacy risk {0} outside (0, 1]")]
    InvalidRisk(f64),
    #[error("budget must be positive")]
    ZeroBudget,
    #[error("structural privacy violated: {0}")]
    Structure(String),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

pub type Result<T> = std::result::Result<T, SelectError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Procedure {
    Random,
    Greedy,
    TrivialLottery,
    RandGreedy,
    SpGreedy,
    Opt,
}

impl Procedure {
    pub const ALL: [Procedure; 6] = [
        Procedure::Random,
        Procedure::Greedy,
        Procedure::TrivialLottery,
        Procedure::RandGreedy,
        Procedure::SpGreedy,
        Procedure::Opt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Procedure::Random => "random",
            Procedure::Greedy => "greedy",
            Procedure::TrivialLottery => "trivial_lottery",
            Procedure::RandGreedy => "rand_greedy",
            Procedure::SpGreedy => "sp_greedy",
            Procedure::Opt => "opt",
        }
    }

    /// Whether the procedure keeps every user's selection probability at or
    /// below the privacy risk.
    pub fn respects_privacy(self) -> bool {
        !matches!(self, Procedure::Greedy | Procedure::Opt)
    }

    pub fn run(self, problem: &SelectionProblem) -> Result<SelectionResult> {
        match self {
            Procedure::Random => select_random(problem),
            Procedure::Greedy => select_greedy(problem),
            Procedure::TrivialLottery => select_trivial_lottery(problem),
            Procedure::RandGreedy => select_rand_greedy(problem),
            Procedure::SpGreedy => select_sp_greedy(problem),
            Procedure::Opt => select_opt_bruteforce(problem),
        }
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Procedure {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Procedure::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .or(match key.as_str() {
                "lottery" => Some(Procedure::TrivialLottery),
                "randgreedy" => Some(Procedure::RandGreedy),
                "spgreedy" => Some(Procedure::SpGreedy),
                _ => None,
            })
            .ok_or_else(|| format!("unknown procedure `{s}`"))
    }
}

/// How `rand_greedy` draws its subsample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Each candidate independently with probability r.
    #[default]
    Bernoulli,
    /// Exactly round(|W'| * r) candidates, uniformly without replacement.
    FixedSize,
}

/// One budgeted selection task.
#[derive(Debug, Clone)]
pub struct SelectionProblem {
    utility: CoverageUtility,
    budget: usize,
    risk: f64,
    seed: u64,
    engine: GreedyEngine,
    sampling: SamplingMode,
}

impl SelectionProblem {
    pub fn new(utility: &CoverageUtility, budget: usize, risk: f64, seed: u64) -> Result<Self> {
        if !(risk > 0.0 && risk <= 1.0) {
            return Err(SelectError::InvalidRisk(risk));
        }
        if budget == 0 {
            return Err(SelectError::ZeroBudget);
        }
        Ok(Self {
            utility: utility.fresh(),
            budget,
            risk,
            seed,
            engine: GreedyEngine::default(),
            sampling: SamplingMode::default(),
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_engine(mut self, engine: GreedyEngine) -> Self {
        self.engine = engine;
        self
    }

    pub fn with_sampling(mut self, sampling: SamplingMode) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn utility(&self) -> &CoverageUtility {
        &self.utility
    }

    pub fn population(&self) -> &Population {
        self.utility.population()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn risk(&self) -> f64 {
        self.risk
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn engine(&self) -> GreedyEngine {
        self.engine
    }

    pub fn sampling(&self) -> SamplingMode {
        self.sampling
    }

    /// floor(|W| * r): the largest set any privacy-respecting procedure may draw.
    pub fn privacy_capacity(&self) -> usize {
        privacy_capacity(self.population().len(), self.risk)
    }

    /// ceil(1 / r): the obfuscation set size.
    pub fn obfuscation_size(&self) -> usize {
        obfuscation_size(self.risk)
    }

    fn check_pool(&self) -> Result<()> {
        let pool = self.utility.candidates().len();
        if self.budget > pool {
            return Err(SelectError::BudgetExceedsPool {
                budget: self.budget,
                pool,
            });
        }
        Ok(())
    }

    fn check_privacy_capacity(&self) -> Result<()> {
        let capacity = self.privacy_capacity();
        if self.budget > capacity {
            return Err(SelectError::BudgetExceedsPrivacy {
                budget: self.budget,
                capacity,
            });
        }
        Ok(())
    }
}

pub fn privacy_capacity(population: usize, risk: f64) -> usize {
    (population as f64 * risk + RATE_EPS).floor() as usize
}

pub fn obfuscation_size(risk: f64) -> usize {
    ((1.0 / risk) - RATE_EPS).ceil().max(1.0) as usize
}

/// Audit record of one selection step.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub greedy_pick: usize,
    /// Empty for procedures that do not obfuscate.
    pub obfuscation_set: Vec<usize>,
    pub final_pick: usize,
    pub marginal_of_greedy_pick: f64,
    pub marginal_of_final_pick: f64,
    /// Largest distance from the greedy pick to a member of the obfuscation set.
    pub obfuscation_radius: f64,
}

impl IterationRecord {
    fn plain(pick: usize, gain: f64) -> Self {
        Self {
            greedy_pick: pick,
            obfuscation_set: Vec::new(),
            final_pick: pick,
            marginal_of_greedy_pick: gain,
            marginal_of_final_pick: gain,
            obfuscation_radius: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub procedure: Procedure,
    /// Selected users in pick order.
    pub selected: Vec<usize>,
    pub log: Vec<IterationRecord>,
    pub utility: f64,
}

impl SelectionResult {
    fn finish(procedure: Procedure, u: &CoverageUtility, log: Vec<IterationRecord>) -> Self {
        let selected: Vec<usize> = log.iter().map(|r| r.final_pick).collect();
        Self {
            procedure,
            utility: u.evaluate_users(&selected),
            selected,
            log,
        }
    }

    pub fn selected_ids<'a>(&self, pop: &'a Population) -> Vec<&'a str> {
        self.selected.iter().map(|&ix| pop.id(ix)).collect()
    }

    /// Largest realized obfuscation radius, if any obfuscation happened.
    pub fn max_obfuscation_radius(&self) -> Option<f64> {
        self.log
            .iter()
            .filter(|r| !r.obfuscation_set.is_empty())
            .map(|r| r.obfuscation_radius)
            .reduce(f64::max)
    }
}

fn greedy_steps(
    u: &mut CoverageUtility,
    pool: &[usize],
    picks: usize,
    engine: GreedyEngine,
) -> Vec<IterationRecord> {
    let mut picker = Picker::new(engine, u, pool);
    let mut log = Vec::with_capacity(picks);
    for _ in 0..picks {
        let Some((w, gain)) = picker.next(u, |_| true) else {
            break;
        };
        u.commit_unchecked(w);
        log.push(IterationRecord::plain(w, gain));
    }
    log
}

/// Uniform draw of B candidates without replacement.
pub fn select_random(p: &SelectionProblem) -> Result<SelectionResult> {
    p.check_pool()?;
    p.check_privacy_capacity()?;
    let mut rng = rng_from_seed(p.seed);
    let mut u = p.utility.fresh();
    let candidates = p.utility.candidates();
    let mut log = Vec::with_capacity(p.budget);
    for i in index::sample(&mut rng, candidates.len(), p.budget) {
        let w = candidates[i];
        let gain = u.gain_unchecked(w);
        u.commit_unchecked(w);
        log.push(IterationRecord::plain(w, gain));
    }
    Ok(SelectionResult::finish(Procedure::Random, &u, log))
}

/// B rounds of argmax marginal gain over the remaining candidates. Ignores the
/// privacy risk.
pub fn select_greedy(p: &SelectionProblem) -> Result<SelectionResult> {
    p.check_pool()?;
    let mut u = p.utility.fresh();
    let log = greedy_steps(&mut u, p.utility.candidates(), p.budget, p.engine);
    Ok(SelectionResult::finish(Procedure::Greedy, &u, log))
}

/// Greedy's set with probability r, otherwise the empty set.
pub fn select_trivial_lottery(p: &SelectionProblem) -> Result<SelectionResult> {
    p.check_pool()?;
    p.check_privacy_capacity()?;
    let mut rng = rng_from_seed(p.seed);
    let keep = rng.random_bool(p.risk);
    let mut u = p.utility.fresh();
    let log = if keep {
        greedy_steps(&mut u, p.utility.candidates(), p.budget, p.engine)
    } else {
        Vec::new()
    };
    Ok(SelectionResult::finish(Procedure::TrivialLottery, &u, log))
}

/// Subsample candidates at rate r, then run greedy on the subsample.
pub fn select_rand_greedy(p: &SelectionProblem) -> Result<SelectionResult> {
    p.check_pool()?;
    p.check_privacy_capacity()?;
    let mut rng = rng_from_seed(p.seed);
    let candidates = p.utility.candidates();
    let sample: Vec<usize> = match p.sampling {
        SamplingMode::Bernoulli => candidates
            .iter()
            .copied()
            .filter(|_| rng.random_bool(p.risk))
            .collect(),
        SamplingMode::FixedSize => {
            let size = ((candidates.len() as f64 * p.risk).round() as usize).min(candidates.len());
            let mut picked: Vec<usize> = index::sample(&mut rng, candidates.len(), size).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| candidates[i]).collect()
        }
    };
    let mut u = p.utility.fresh();
    if sample.is_empty() {
        warn!(
            "rand_greedy: empty subsample (seed {}), returning the empty set",
            p.seed
        );
        return Ok(SelectionResult::finish(
            Procedure::RandGreedy,
            &u,
            Vec::new(),
        ));
    }
    let picks = p.budget.min(sample.len());
    let log = greedy_steps(&mut u, &sample, picks, p.engine);
    Ok(SelectionResult::finish(Procedure::RandGreedy, &u, log))
}

/// Greedy selection with obfuscation: each greedy pick is pooled with its
/// ceil(1/r) - 1 nearest remaining candidates, one member of that set is drawn
/// uniformly, and the whole set leaves the pool.
pub fn select_sp_greedy(p: &SelectionProblem) -> Result<SelectionResult> {
    p.check_pool()?;
    p.check_privacy_capacity()?;
    let k = p.obfuscation_size();
    let pop = p.population();
    let ranks = pop.id_ranks();
    let mut rng = rng_from_seed(p.seed);
    let mut u = p.utility.fresh();

    let mut pool: Vec<usize> = p.utility.candidates().to_vec();
    let mut in_pool = vec![false; pop.len()];
    for &w in &pool {
        in_pool[w] = true;
    }
    let mut picker = Picker::new(p.engine, &u, &pool);
    let mut log = Vec::with_capacity(p.budget);

    for picked in 0..p.budget {
        if pool.len() < k {
            return Err(SelectError::PoolExhausted {
                picked,
                remaining: pool.len(),
                needed: k,
            });
        }
        let (s, gain) = picker
            .next(&u, |w| in_pool[w])
            .expect("pool holds at least k >= 1 users");

        let by_distance = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0)
                .then_with(|| ranks[a.1].cmp(&ranks[b.1]))
        };
        let mut neighbours: Vec<(f64, usize)> = pool
            .iter()
            .filter(|&&w| w != s)
            .map(|&w| (pop.distance_ix(s, w), w))
            .collect();
        if k > 1 {
            neighbours.select_nth_unstable_by(k - 2, by_distance);
            neighbours.truncate(k - 1);
            neighbours.sort_unstable_by(by_distance);
        } else {
            neighbours.clear();
        }
        let radius = neighbours.last().map_or(0.0, |&(d, _)| d);
        let mut psi = Vec::with_capacity(k);
        psi.push(s);
        psi.extend(neighbours.iter().map(|&(_, w)| w));

        let pick = psi[rng.random_range(0..psi.len())];
        let pick_gain = if pick == s {
            gain
        } else {
            u.gain_unchecked(pick)
        };
        u.commit_unchecked(pick);
        for &w in &psi {
            in_pool[w] = false;
        }
        pool.retain(|&w| in_pool[w]);
        log.push(IterationRecord {
            greedy_pick: s,
            obfuscation_set: psi,
            final_pick: pick,
            marginal_of_greedy_pick: gain,
            marginal_of_final_pick: pick_gain,
            obfuscation_radius: radius,
        });
    }
    Ok(SelectionResult::finish(Procedure::SpGreedy, &u, log))
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exhaustive argmax over all B-subsets of the candidates. Ties go to the
/// lexicographically smallest id tuple.
pub fn select_opt_bruteforce(p: &SelectionProblem) -> Result<SelectionResult> {
    p.check_pool()?;
    let candidates = p.utility.candidates();
    let n = candidates.len();
    let subsets = binomial(n, p.budget);
    if n > OPT_MAX_CANDIDATES || subsets > OPT_MAX_SUBSETS {
        return Err(SelectError::InstanceTooLarge {
            candidates: n,
            subsets,
        });
    }
    let b = p.budget;
    // Candidates are already in id order, so index combinations enumerate in
    // lexicographic id order.
    let mut idx: Vec<usize> = (0..b).collect();
    let mut set: Vec<usize> = idx.iter().map(|&i| candidates[i]).collect();
    let mut best_val = p.utility.evaluate_users(&set);
    let mut best = set.clone();
    loop {
        let Some(pos) = (0..b).rev().find(|&i| idx[i] < n - b + i) else {
            break;
        };
        idx[pos] += 1;
        for j in pos + 1..b {
            idx[j] = idx[j - 1] + 1;
        }
        for (slot, &i) in set.iter_mut().zip(&idx) {
            *slot = candidates[i];
        }
        let v = p.utility.evaluate_users(&set);
        if v > best_val {
            best_val = v;
            best.clone_from(&set);
        }
    }
    let mut u = p.utility.fresh();
    let log = best
        .into_iter()
        .map(|w| {
            let gain = u.gain_unchecked(w);
            u.commit_unchecked(w);
            IterationRecord::plain(w, gain)
        })
        .collect();
    Ok(SelectionResult::finish(Procedure::Opt, &u, log))
}

/// Checks the per-run obfuscation structure: every set has exactly `size`
/// members, starts with the greedy pick, contains the final pick, and no user
/// appears in two sets.
pub fn check_obfuscation_structure(result: &SelectionResult, size: usize) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (i, rec) in result.log.iter().enumerate() {
        let psi = &rec.obfuscation_set;
        if psi.len() != size {
            return Err(SelectError::Structure(format!(
                "iteration {i}: obfuscation set has {} members, expected {size}",
                psi.len()
            )));
        }
        if psi.first() != Some(&rec.greedy_pick) || !psi.contains(&rec.final_pick) {
            return Err(SelectError::Structure(format!(
                "iteration {i}: picks are not members of the obfuscation set"
            )));
        }
        if let Some(w) = psi.iter().find(|&&w| !seen.insert(w)) {
            return Err(SelectError::Structure(format!(
                "iteration {i}: user {w} already appeared in an earlier obfuscation set"
            )));
        }
    }
    Ok(())
}
