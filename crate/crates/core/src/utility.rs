//! Coverage utility: the mean reduction, over the whole population, of the
//! distance from each user to its nearest selected user, baselined against a
//! fixed reference set.
//!
//! ```text
//! f(S) = 1/|W| * sum_w ( min_{x in X} D(x, w) - min_{s in S ∪ X} D(s, w) )
//! ```
//!
//! [`CoverageUtility`] keeps a per-user nearest-distance cache so that a
//! marginal gain costs one pass over the population. Cache-free routes
//! ([`CoverageUtility::evaluate`], [`CoverageUtility::marginal_gain`]) recompute
//! everything from scratch and are used to cross-check the cache.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::population::{Metric, Population};

/// Absolute tolerance used by the property checkers.
pub const TOLERANCE: f64 = 1e-9;

/// Smoothness constant of the coverage utility (in its normalised units).
pub const SMOOTHNESS: f64 = 1.0;

/// Diversification constant of the coverage utility.
pub const DIVERSIFICATION: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("user {0} is not in the population")]
    UnknownUser(usize),
    #[error("user {0} is not a selection candidate")]
    NotCandidate(usize),
    #[error("user {0} is already selected")]
    AlreadySelected(usize),
    #[error("set sizes differ: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("the selected set must be nonempty")]
    EmptySet,
    #[error("the reference set must be nonempty")]
    EmptyReference,
    #[error("the candidate set must be nonempty")]
    EmptyCandidates,
    #[error("reference point has non-finite coordinates")]
    BadReference,
}

pub type Result<T> = std::result::Result<T, UtilityError>;

/// Incremental set-function surface consumed by the greedy engines.
///
/// Implementations must be monotone submodular so that stale gains remain
/// valid upper bounds.
pub trait IncrementalObjective {
    /// Marginal gain of `w` against the committed set. Caller guarantees `w`
    /// is a valid, uncommitted candidate.
    fn gain_unchecked(&self, w: usize) -> f64;
    fn commit_unchecked(&mut self, w: usize);
    /// Number of committed elements.
    fn committed_len(&self) -> usize;
}

#[derive(Debug)]
struct Shared {
    reference: Vec<[f64; 2]>,
    candidates: Vec<usize>,
    is_candidate: Vec<bool>,
    base_dist: Vec<f64>,
    empty_gains: Vec<f64>,
}

/// Coverage utility over a population with a live nearest-distance cache.
///
/// Cloning is cheap relative to construction: the reference distances and the
/// gains against the empty set are shared.
#[derive(Debug, Clone)]
pub struct CoverageUtility {
    pop: Arc<Population>,
    shared: Arc<Shared>,
    min_dist: Vec<f64>,
    selected: Vec<usize>,
    is_selected: Vec<bool>,
}

impl CoverageUtility {
    /// Default construction: reference set is the centroid of the population
    /// bounding box and candidates are the expert cohort.
    pub fn new(pop: Arc<Population>) -> Result<Self> {
        let candidates = pop.experts().to_vec();
        Self::with_candidates(pop, candidates)
    }

    /// Default reference set with an explicit candidate set.
    pub fn with_candidates(pop: Arc<Population>, candidates: Vec<usize>) -> Result<Self> {
        let reference = default_reference(&pop).ok_or(UtilityError::EmptyReference)?;
        Self::with_reference(pop, vec![reference], candidates)
    }

    /// Every user is a candidate.
    pub fn all_candidates(pop: Arc<Population>) -> Result<Self> {
        let candidates = (0..pop.len()).collect();
        Self::with_candidates(pop, candidates)
    }

    pub fn with_reference(
        pop: Arc<Population>,
        reference: Vec<[f64; 2]>,
        mut candidates: Vec<usize>,
    ) -> Result<Self> {
        if reference.is_empty() {
            return Err(UtilityError::EmptyReference);
        }
        if reference.iter().flatten().any(|c| !c.is_finite()) {
            return Err(UtilityError::BadReference);
        }
        if candidates.is_empty() {
            return Err(UtilityError::EmptyCandidates);
        }
        let n = pop.len();
        let mut is_candidate = vec![false; n];
        for &c in &candidates {
            if c >= n {
                return Err(UtilityError::UnknownUser(c));
            }
            is_candidate[c] = true;
        }
        candidates.sort_unstable_by_key(|&c| pop.id_rank(c));
        candidates.dedup();

        let metric = pop.metric();
        let base_dist: Vec<f64> = (0..n)
            .map(|w| {
                reference
                    .iter()
                    .map(|&x| metric.distance(x, pop.coords(w)))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let n_users = n as f64;
        let mut empty_gains = vec![0.0; n];
        let gains: Vec<(usize, f64)> = candidates
            .par_iter()
            .map(|&w| (w, gain_against(&pop, &base_dist, w) / n_users))
            .collect();
        for (w, g) in gains {
            empty_gains[w] = g;
        }

        Ok(Self {
            min_dist: base_dist.clone(),
            shared: Arc::new(Shared {
                reference,
                candidates,
                is_candidate,
                base_dist,
                empty_gains,
            }),
            pop,
            selected: Vec::new(),
            is_selected: vec![false; n],
        })
    }

    pub fn population(&self) -> &Arc<Population> {
        &self.pop
    }

    pub fn reference(&self) -> &[[f64; 2]] {
        &self.shared.reference
    }

    /// Candidates in ascending id order.
    pub fn candidates(&self) -> &[usize] {
        &self.shared.candidates
    }

    #[inline]
    pub fn is_candidate(&self, w: usize) -> bool {
        self.shared.is_candidate.get(w).copied().unwrap_or(false)
    }

    /// Users committed so far, in commit order.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    #[inline]
    pub fn is_selected(&self, w: usize) -> bool {
        self.is_selected.get(w).copied().unwrap_or(false)
    }

    /// Current nearest distance from every user to the committed set or the
    /// reference set.
    pub fn cached_min_dist(&self) -> &[f64] {
        &self.min_dist
    }

    /// A copy of this utility with an empty committed set.
    pub fn fresh(&self) -> Self {
        Self {
            pop: Arc::clone(&self.pop),
            shared: Arc::clone(&self.shared),
            min_dist: self.shared.base_dist.clone(),
            selected: Vec::new(),
            is_selected: vec![false; self.pop.len()],
        }
    }

    /// Gain of each candidate against the empty set, indexed by user.
    pub fn empty_gain(&self, w: usize) -> f64 {
        self.shared.empty_gains[w]
    }

    /// Utility of the committed set, from the cache.
    pub fn value(&self) -> f64 {
        let total: f64 = self
            .shared
            .base_dist
            .iter()
            .zip(&self.min_dist)
            .map(|(b, m)| b - m)
            .sum();
        total / self.pop.len() as f64
    }

    fn check_candidates(&self, set: &[usize]) -> Result<()> {
        for &s in set {
            if s >= self.pop.len() {
                return Err(UtilityError::UnknownUser(s));
            }
            if !self.is_candidate(s) {
                return Err(UtilityError::NotCandidate(s));
            }
        }
        Ok(())
    }

    fn check_users(&self, set: &[usize]) -> Result<()> {
        match set.iter().find(|&&s| s >= self.pop.len()) {
            Some(&s) => Err(UtilityError::UnknownUser(s)),
            None => Ok(()),
        }
    }

    /// Utility of `set`, computed from scratch.
    pub fn evaluate(&self, set: &[usize]) -> Result<f64> {
        self.check_candidates(set)?;
        Ok(self.evaluate_users(set))
    }

    /// Utility of an arbitrary set of users (candidates or not). Panics on
    /// out-of-range indices.
    pub fn evaluate_users(&self, set: &[usize]) -> f64 {
        let pop = &*self.pop;
        let total: f64 = self
            .shared
            .base_dist
            .iter()
            .enumerate()
            .map(|(w, &base)| {
                let nearest = set
                    .iter()
                    .map(|&s| pop.distance_ix(s, w))
                    .fold(base, f64::min);
                base - nearest
            })
            .sum();
        total / pop.len() as f64
    }

    fn nearest_dists(&self, set: &[usize]) -> Vec<f64> {
        let pop = &*self.pop;
        self.shared
            .base_dist
            .iter()
            .enumerate()
            .map(|(w, &base)| {
                set.iter()
                    .map(|&s| pop.distance_ix(s, w))
                    .fold(base, f64::min)
            })
            .collect()
    }

    /// `f(set ∪ {w}) - f(set)`, computed without the cache.
    pub fn marginal_gain(&self, set: &[usize], w: usize) -> Result<f64> {
        self.check_candidates(set)?;
        self.check_candidates(&[w])?;
        if set.contains(&w) {
            return Err(UtilityError::AlreadySelected(w));
        }
        Ok(self.marginal_gain_users(set, w))
    }

    fn marginal_gain_users(&self, set: &[usize], w: usize) -> f64 {
        gain_against(&self.pop, &self.nearest_dists(set), w) / self.pop.len() as f64
    }

    /// Marginal gain of `w` against the committed set, from the cache.
    pub fn gain(&self, w: usize) -> Result<f64> {
        self.check_candidates(&[w])?;
        if self.is_selected[w] {
            return Err(UtilityError::AlreadySelected(w));
        }
        Ok(self.gain_unchecked(w))
    }

    /// Adds `w` to the committed set and tightens the cache.
    pub fn commit(&mut self, w: usize) -> Result<()> {
        self.check_candidates(&[w])?;
        if self.is_selected[w] {
            return Err(UtilityError::AlreadySelected(w));
        }
        self.commit_unchecked(w);
        Ok(())
    }

    /// Smoothness check: `|f(S) - f(S~)| <= alpha` where `S~` replaces every
    /// member of `S` by a user within `alpha` of it. Sets may contain any
    /// users, not only candidates.
    pub fn check_smoothness(&self, set: &[usize], perturbed: &[usize], alpha: f64) -> Result<bool> {
        if set.len() != perturbed.len() {
            return Err(UtilityError::SizeMismatch {
                left: set.len(),
                right: perturbed.len(),
            });
        }
        self.check_users(set)?;
        self.check_users(perturbed)?;
        let diff = (self.evaluate_users(set) - self.evaluate_users(perturbed)).abs();
        Ok(diff <= SMOOTHNESS * alpha + TOLERANCE)
    }

    /// Diversification check: the gain of `w` is at most its distance to the
    /// nearest member of `set`.
    pub fn check_diversification(&self, set: &[usize], w: usize) -> Result<bool> {
        if set.is_empty() {
            return Err(UtilityError::EmptySet);
        }
        self.check_users(set)?;
        self.check_users(&[w])?;
        if set.contains(&w) {
            return Err(UtilityError::AlreadySelected(w));
        }
        let alpha = set
            .iter()
            .map(|&s| self.pop.distance_ix(s, w))
            .fold(f64::INFINITY, f64::min);
        Ok(self.marginal_gain_users(set, w) <= DIVERSIFICATION * alpha + TOLERANCE)
    }
}

impl IncrementalObjective for CoverageUtility {
    #[inline]
    fn gain_unchecked(&self, w: usize) -> f64 {
        if self.selected.is_empty() {
            return self.shared.empty_gains[w];
        }
        gain_against(&self.pop, &self.min_dist, w) / self.pop.len() as f64
    }

    fn commit_unchecked(&mut self, w: usize) {
        let pop = &*self.pop;
        let here = pop.coords(w);
        match pop.metric() {
            Metric::Euclidean => {
                for (m, p) in self.min_dist.iter_mut().zip(pop.points()) {
                    let (dx, dy) = (here[0] - p[0], here[1] - p[1]);
                    let sq = dx * dx + dy * dy;
                    if sq < *m * *m {
                        *m = m.min(sq.sqrt());
                    }
                }
            }
            metric => {
                for (m, p) in self.min_dist.iter_mut().zip(pop.points()) {
                    *m = m.min(metric.distance(here, *p));
                }
            }
        }
        self.selected.push(w);
        self.is_selected[w] = true;
    }

    fn committed_len(&self) -> usize {
        self.selected.len()
    }
}

/// Unnormalised gain `sum_v max(0, nearest[v] - D(w, v))`, summed in pool
/// order so the result is bit-stable.
#[inline]
fn gain_against(pop: &Population, nearest: &[f64], w: usize) -> f64 {
    let here = pop.coords(w);
    match pop.metric() {
        // Squared comparison first: most users are farther than their
        // current nearest point and need no square root.
        Metric::Euclidean => nearest
            .iter()
            .zip(pop.points())
            .map(|(&m, p)| {
                let (dx, dy) = (here[0] - p[0], here[1] - p[1]);
                let sq = dx * dx + dy * dy;
                if sq < m * m {
                    (m - sq.sqrt()).max(0.0)
                } else {
                    0.0
                }
            })
            .sum(),
        metric => nearest
            .iter()
            .zip(pop.points())
            .map(|(&m, p)| (m - metric.distance(here, *p)).max(0.0))
            .sum(),
    }
}

/// Centroid of the population bounding box.
pub fn default_reference(pop: &Population) -> Option<[f64; 2]> {
    let [x0, x1, y0, y1] = pop.bbox()?;
    Some([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
}
