#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stochastic_privacy::population::{Metric, Population, User};
use stochastic_privacy::utility::CoverageUtility;

/// Straight-line coverage objective over raw points, written without any of
/// the library's caching: mean over users of how much closer the nearest
/// member of `set` (or the reference) is than the reference alone.
pub fn oracle_value(points: &[[f64; 2]], reference: [f64; 2], set: &[[f64; 2]]) -> f64 {
    let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for &w in points {
        let base = d(reference, w);
        let mut best = base;
        for &s in set {
            best = best.min(d(s, w));
        }
        total += base - best;
    }
    total / points.len() as f64
}

pub fn bbox_centre(points: &[[f64; 2]]) -> [f64; 2] {
    let xs = points.iter().map(|p| p[0]);
    let ys = points.iter().map(|p| p[1]);
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| {
        (a.min(y), b.max(y))
    });
    [(x0 + x1) / 2.0, (y0 + y1) / 2.0]
}

pub fn oracle_for(u: &CoverageUtility, set: &[usize]) -> f64 {
    let pop = u.population();
    let pts = pop.points();
    let chosen: Vec<[f64; 2]> = set.iter().map(|&i| pts[i]).collect();
    oracle_value(pts, bbox_centre(pts), &chosen)
}

/// Uniform points in `[0, side]^2`, every user a candidate.
pub fn uniform_instance(n: usize, side: f64, seed: u64) -> CoverageUtility {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..n)
        .map(|i| {
            User::new(
                format!("p{i:04}"),
                rng.random_range(0.0..side),
                rng.random_range(0.0..side),
            )
        })
        .collect();
    let pop = Population::new(users, Metric::Euclidean).unwrap();
    CoverageUtility::all_candidates(Arc::new(pop)).unwrap()
}

/// Tight clusters of `per` users around `centres`, all candidates.
pub fn clustered_instance(
    centres: &[[f64; 2]],
    per: usize,
    spread: f64,
    seed: u64,
) -> CoverageUtility {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::new();
    for (c, centre) in centres.iter().enumerate() {
        for i in 0..per {
            let x = centre[0] + rng.random_range(-spread..spread);
            let y = centre[1] + rng.random_range(-spread..spread);
            users.push(User::new(format!("c{c:02}_{i:04}"), x, y));
        }
    }
    let pop = Population::new(users, Metric::Euclidean).unwrap();
    CoverageUtility::all_candidates(Arc::new(pop)).unwrap()
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
