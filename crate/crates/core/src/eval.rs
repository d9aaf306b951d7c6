//! Retrieval and clustering metrics plus weight-balance diagnostics.

use crate::data::NoiseMask;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::weights::WeightState;
use ndarray::ArrayView2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Fraction of queries whose `K` nearest neighbors (dot-product similarity,
/// query excluded, ties broken by smaller id) contain a same-label sample.
/// Returns one value per requested `K`.
pub fn recall_at_k(
    embeddings: ArrayView2<'_, f64>,
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    let n = labels.len();
    if embeddings.nrows() != n {
        return Err(Error::contract(format!(
            "embedding rows ({}) do not match label count ({n})",
            embeddings.nrows()
        )));
    }
    for &k in ks {
        if k == 0 || k >= n {
            return Err(Error::contract(format!(
                "K={k} outside the valid range [1, {}]",
                n.saturating_sub(1)
            )));
        }
    }
    let sim = embeddings.dot(&embeddings.t());
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let mut hits = vec![0usize; ks.len()];
    for q in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != q).collect();
        order.sort_by(|&a, &b| {
            sim[(q, b)]
                .partial_cmp(&sim[(q, a)])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut first_hit = None;
        for (rank, &j) in order.iter().take(max_k).enumerate() {
            if labels[j] == labels[q] {
                first_hit = Some(rank + 1);
                break;
            }
        }
        if let Some(r) = first_hit {
            for (i, &k) in ks.iter().enumerate() {
                if k >= r {
                    hits[i] += 1;
                }
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / n as f64).collect())
}

const KMEANS_RESTARTS: usize = 5;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-8;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign_points(data: ArrayView2<'_, f64>, centroids: &[Vec<f64>]) -> Vec<usize> {
    (0..data.nrows())
        .map(|i| {
            let row: Vec<f64> = data.row(i).to_vec();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(&row, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn kmeans_once(data: ArrayView2<'_, f64>, k: usize, seed: u64) -> (Vec<usize>, f64) {
    let n = data.nrows();
    let dim = data.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(data.row(rng.gen_range(0..n)).to_vec());
    while centroids.len() < k {
        let dists: Vec<f64> = (0..n)
            .map(|i| {
                let row: Vec<f64> = data.row(i).to_vec();
                centroids
                    .iter()
                    .map(|c| squared_distance(&row, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let next = match WeightedIndex::new(&dists) {
            Ok(w) => w.sample(&mut rng),
            // every point coincides with a centroid: fall back to uniform
            Err(_) => rng.gen_range(0..n),
        };
        centroids.push(data.row(next).to_vec());
    }

    let mut assignment = assign_points(data, &centroids);
    for _ in 0..KMEANS_MAX_ITERS {
        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (j, &v) in data.row(i).iter().enumerate() {
                sums[a][j] += v;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // revive an empty cluster with the point farthest from its
                // centroid (deterministic: max distance, then smallest id)
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = squared_distance(&data.row(a).to_vec(), &centroids[assignment[a]]);
                        let db = squared_distance(&data.row(b).to_vec(), &centroids[assignment[b]]);
                        da.partial_cmp(&db)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                let new_c: Vec<f64> = data.row(far).to_vec();
                movement = movement.max(squared_distance(&new_c, &centroids[c]).sqrt());
                centroids[c] = new_c;
                continue;
            }
            let new_c: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement = movement.max(squared_distance(&new_c, &centroids[c]).sqrt());
            centroids[c] = new_c;
        }
        assignment = assign_points(data, &centroids);
        if movement < KMEANS_TOL {
            break;
        }
    }

    let inertia: f64 = (0..n)
        .map(|i| squared_distance(&data.row(i).to_vec(), &centroids[assignment[i]]))
        .sum();
    (assignment, inertia)
}

/// Seeded k-means with k-means++ initialization and a fixed number of
/// restarts; the assignment with the best inertia wins.
pub fn kmeans(data: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = data.nrows();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "cluster count {k} outside the valid range [1, {n}]"
        )));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let result = kmeans_once(data, k, derive_seed(seed, restart as u64));
        if best.as_ref().is_none_or(|(_, b)| result.1 < *b) {
            best = Some(result);
        }
    }
    Ok(best.unwrap().0)
}

fn entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(A,B) / (H(A) + H(B))` of two
/// partitions given as label vectors. Natural-log entropies; returns 0 when
/// both partitions are single-cluster (0/0 convention).
pub fn nmi_partitions(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partition lengths differ");
    let n = a.len() as f64;
    let mut count_a: BTreeMap<usize, usize> = BTreeMap::new();
    let mut count_b: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *count_a.entry(x).or_default() += 1;
        *count_b.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let mut mi = 0.0;
    for (&(x, y), &c) in &joint {
        let p_xy = c as f64 / n;
        let p_x = count_a[&x] as f64 / n;
        let p_y = count_b[&y] as f64 / n;
        mi += p_xy * (p_xy / (p_x * p_y)).ln();
    }
    let denom = entropy(&count_a, n) + entropy(&count_b, n);
    if denom == 0.0 {
        return 0.0;
    }
    (2.0 * mi / denom).clamp(0.0, 1.0)
}

/// Clusters the embeddings with seeded k-means and scores the clustering
/// against the ground-truth labels by normalized mutual information.
pub fn nmi(embeddings: ArrayView2<'_, f64>, labels: &[usize], k: usize, seed: u64) -> Result<f64> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::contract(format!(
            "embedding rows ({}) do not match label count ({})",
            embeddings.nrows(),
            labels.len()
        )));
    }
    let clusters = kmeans(embeddings, k, seed)?;
    Ok(nmi_partitions(labels, &clusters))
}

/// Mean and spread of per-class average weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStats {
    /// Mean of the per-class average weights.
    pub maw: f64,
    /// Population standard deviation of the per-class average weights.
    pub sdaw: f64,
    pub per_class: Vec<f64>,
}

pub fn weight_stats(state: &WeightState) -> WeightStats {
    let c = state.n_classes();
    let per_class: Vec<f64> = (0..c).map(|k| state.class_avg(k)).collect();
    let maw = per_class.iter().sum::<f64>() / c as f64;
    let var = per_class.iter().map(|r| (r - maw).powi(2)).sum::<f64>() / c as f64;
    WeightStats {
        maw,
        sdaw: var.sqrt(),
        per_class,
    }
}

/// Mean weights over the clean/noisy partitions of a noise mask and their
/// difference (clean minus noisy).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationStats {
    pub clean_mean: f64,
    pub noisy_mean: f64,
    pub gap: f64,
}

pub fn weight_separation(state: &WeightState, mask: &NoiseMask) -> Result<SeparationStats> {
    let n = state.len();
    if mask.flips().iter().any(|f| f.id >= n) {
        return Err(Error::contract(
            "noise mask references ids outside the weight vector",
        ));
    }
    let mut clean = (0.0, 0usize);
    let mut noisy = (0.0, 0usize);
    for (id, &w) in state.weights().iter().enumerate() {
        if mask.is_flipped(id) {
            noisy.0 += w;
            noisy.1 += 1;
        } else {
            clean.0 += w;
            clean.1 += 1;
        }
    }
    if clean.1 == 0 || noisy.1 == 0 {
        return Err(Error::contract(
            "weight separation needs at least one clean and one noisy sample",
        ));
    }
    let clean_mean = clean.0 / clean.1 as f64;
    let noisy_mean = noisy.0 / noisy.1 as f64;
    Ok(SeparationStats {
        clean_mean,
        noisy_mean,
        gap: clean_mean - noisy_mean,
    })
}
