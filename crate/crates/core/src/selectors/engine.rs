use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::utility::{CoverageUtility, IncrementalObjective};

/// How the greedy argmax is computed. Both engines return identical picks
/// under the lowest-id tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GreedyEngine {
    /// Priority queue of stale upper bounds; only the top is re-evaluated.
    #[default]
    Lazy,
    /// Full rescan of the pool every iteration.
    Plain,
}

#[derive(Debug)]
pub(super) struct Entry {
    gain: f64,
    rank: usize,
    user: usize,
    round: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Max-heap: larger gain first, then lower id rank.
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.rank.cmp(&self.rank))
    }
}

/// Greedy argmax provider over a shrinking pool.
pub(super) enum Picker {
    Lazy(BinaryHeap<Entry>),
    Plain(Vec<usize>),
}

impl Picker {
    /// `pool` must hold distinct, uncommitted candidates.
    pub(crate) fn new(engine: GreedyEngine, u: &CoverageUtility, pool: &[usize]) -> Self {
        match engine {
            GreedyEngine::Lazy => {
                let round = u.committed_len();
                let ranks = u.population().id_ranks();
                Picker::Lazy(
                    pool.iter()
                        .map(|&w| Entry {
                            gain: u.gain_unchecked(w),
                            rank: ranks[w],
                            user: w,
                            round,
                        })
                        .collect(),
                )
            }
            GreedyEngine::Plain => {
                let mut pool = pool.to_vec();
                let ranks = u.population().id_ranks();
                pool.sort_unstable_by_key(|&w| ranks[w]);
                Picker::Plain(pool)
            }
        }
    }

    /// Removes and returns the pool member with maximum marginal gain among
    /// those for which `alive` holds, ties going to the lowest id.
    pub(crate) fn next<F>(&mut self, u: &CoverageUtility, alive: F) -> Option<(usize, f64)>
    where
        F: Fn(usize) -> bool,
    {
        match self {
            Picker::Lazy(heap) => {
                let round = u.committed_len();
                while let Some(mut top) = heap.pop() {
                    if !alive(top.user) || u.is_selected(top.user) {
                        continue;
                    }
                    if top.round == round {
                        return Some((top.user, top.gain));
                    }
                    top.gain = u.gain_unchecked(top.user);
                    top.round = round;
                    heap.push(top);
                }
                None
            }
            Picker::Plain(pool) => {
                pool.retain(|&w| alive(w) && !u.is_selected(w));
                let mut best: Option<(usize, usize, f64)> = None;
                for (pos, &w) in pool.iter().enumerate() {
                    let g = u.gain_unchecked(w);
                    // Pool is in id order, so strict comparison keeps the lowest id.
                    if best.is_none_or(|(_, _, b)| g > b) {
                        best = Some((pos, w, g));
                    }
                }
                let (pos, w, g) = best?;
                pool.remove(pos);
                Some((w, g))
            }
        }
    }
}
