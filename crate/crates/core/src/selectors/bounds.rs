//! Utility guarantees for the privacy-respecting procedures, evaluated a
//! posteriori on concrete instances.

use crate::utility::{CoverageUtility, DIVERSIFICATION, SMOOTHNESS};

use super::SelectionResult;

/// Greedy approximation ratio for monotone submodular maximization under a
/// cardinality constraint.
pub const GREEDY_RATIO: f64 = 1.0 - 1.0 / std::f64::consts::E;

/// Expected-utility floor of the trivial lottery: `(1 - 1/e) * r * f(OPT)`.
pub fn lottery_lower_bound(opt_value: f64, risk: f64) -> f64 {
    GREEDY_RATIO * risk * opt_value
}

/// Expected-utility floor of `rand_greedy`:
/// `(1 - 1/e) * (f(OPT) - alpha_rg * lambda * B)`.
pub fn rand_greedy_lower_bound(opt_value: f64, alpha_rg: f64, budget: usize) -> f64 {
    GREEDY_RATIO * (opt_value - alpha_rg * SMOOTHNESS * budget as f64)
}

/// Expected-utility floor of `sp_greedy`:
/// `(1 - 1/e) * f(OPT) - (2 * lambda + upsilon) * alpha_spg * B`.
pub fn sp_greedy_lower_bound(opt_value: f64, alpha_spg: f64, budget: usize) -> f64 {
    GREEDY_RATIO * opt_value - (2.0 * SMOOTHNESS + DIVERSIFICATION) * alpha_spg * budget as f64
}

/// Realized obfuscation radius of an `sp_greedy` run (0 when nothing was
/// obfuscated).
pub fn alpha_spg(result: &SelectionResult) -> f64 {
    result.max_obfuscation_radius().unwrap_or(0.0)
}

/// Smallest radius `alpha` such that every member of `opt_set` has at least
/// `ceil(log(B / eps) / r)` candidates within `alpha`, provided those
/// neighbourhoods are pairwise disjoint. Returns `None` when the hypothesis
/// cannot be met on this instance.
pub fn alpha_rg(utility: &CoverageUtility, opt_set: &[usize], risk: f64, eps: f64) -> Option<f64> {
    let budget = opt_set.len();
    if budget == 0 || !(eps > 0.0 && eps < 1.0) {
        return None;
    }
    let needed = ((budget as f64 / eps).ln() / risk).ceil().max(1.0) as usize;
    let candidates = utility.candidates();
    if needed > candidates.len() {
        return None;
    }
    let pop = utility.population();
    let mut alpha: f64 = 0.0;
    for &s in opt_set {
        let mut d: Vec<f64> = candidates.iter().map(|&v| pop.distance_ix(s, v)).collect();
        d.sort_unstable_by(f64::total_cmp);
        alpha = alpha.max(d[needed - 1]);
    }
    for &v in candidates {
        let covering = opt_set
            .iter()
            .filter(|&&s| pop.distance_ix(s, v) <= alpha)
            .count();
        if covering > 1 {
            return None;
        }
    }
    Some(alpha)
}
