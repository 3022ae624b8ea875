//! k-means with k-means++ seeding, in Euclidean and cosine (spherical) form.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, normalize_with_tolerance};

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Squared Euclidean distance, arithmetic-mean centers.
    Euclidean,
    /// `1 - cos`, centers are re-normalized sums.
    Cosine,
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Objective after every assignment step: total squared distance
    /// (Euclidean) or total cosine similarity (Cosine).
    pub objective_history: Vec<f64>,
}

fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Metric::Cosine => {
            let nb = dot(b, b).sqrt();
            if nb == 0.0 {
                return 1.0;
            }
            1.0 - dot(a, b) / (dot(a, a).sqrt() * nb)
        }
    }
}

/// k-means++ seeding: indices of the chosen initial points.
pub fn plus_plus_seeds<P: AsRef<[f64]>, R: Rng>(
    points: &[P],
    k: usize,
    metric: Metric,
    rng: &mut R,
) -> Vec<usize> {
    let n = points.len();
    let mut seeds = Vec::with_capacity(k);
    seeds.push(rng.random_range(0..n));
    let mut best: Vec<f64> = points
        .iter()
        .map(|p| distance(metric, p.as_ref(), points[seeds[0]].as_ref()).max(0.0))
        .collect();
    while seeds.len() < k {
        let weights: Vec<f64> = best
            .iter()
            .map(|&d| match metric {
                Metric::Euclidean => d,
                Metric::Cosine => d * d,
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in weights.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
        for (b, p) in best.iter_mut().zip(points) {
            *b = b.min(distance(metric, p.as_ref(), points[next].as_ref()).max(0.0));
        }
    }
    seeds
}

/// Lloyd iterations from k-means++ seeds. Stops when no assignment changes or
/// after `max_iters` assignment passes. Empty clusters keep their previous
/// center. Ties go to the lowest center index.
pub fn kmeans<P: AsRef<[f64]>, R: Rng>(
    points: &[P],
    k: usize,
    metric: Metric,
    max_iters: usize,
    rng: &mut R,
) -> Result<KMeans> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            got: points.len(),
        });
    }
    let dim = points[0].as_ref().len();
    let seeds = plus_plus_seeds(points, k, metric, rng);
    let mut centers: Vec<Vec<f64>> = seeds
        .iter()
        .map(|&i| {
            let p = points[i].as_ref().to_vec();
            match metric {
                Metric::Cosine => normalize_with_tolerance(&p, 0.0).unwrap_or(p),
                Metric::Euclidean => p,
            }
        })
        .collect();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    for iter in 0..max_iters.max(1) {
        iterations = iter + 1;
        let mut changed = false;
        let mut objective = 0.0;
        for (a, p) in assignment.iter_mut().zip(points) {
            let p = p.as_ref();
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = distance(metric, p, c);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            objective += match metric {
                Metric::Euclidean => best_d,
                Metric::Cosine => 1.0 - best_d,
            };
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        history.push(objective);
        if iter > 0 && !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p.as_ref()) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                continue;
            }
            match metric {
                Metric::Euclidean => {
                    centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                }
                Metric::Cosine => {
                    if dot(&sums[j], &sums[j]) > 0.0 {
                        centers[j] = normalize_with_tolerance(&sums[j], 0.0)?;
                    }
                }
            }
        }
    }
    Ok(KMeans {
        centers,
        assignment,
        iterations,
        objective_history: history,
    })
}
