//! Multi-similarity loss: per-anchor log-sum-exp components, informative
//! pair mining, the full-set loss, and the weighted informative batch loss
//! used during training.
//!
//! Similarities are dot products of unit-norm embeddings. All aggregates go
//! through a stable `log(1 + sum exp(x))` so exponents up to +-700 stay
//! finite.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};

/// Hyperparameters of the multi-similarity loss and pair mining.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MsHyperParams {
    /// Positive-pair scale (> 0).
    pub alpha: f64,
    /// Negative-pair scale (> 0).
    pub beta: f64,
    /// Similarity margin.
    pub rho: f64,
    /// Mining margin (>= 0).
    pub eps: f64,
}

impl Default for MsHyperParams {
    fn default() -> Self {
        MsHyperParams {
            alpha: 2.0,
            beta: 50.0,
            rho: 1.0,
            eps: 0.1,
        }
    }
}

impl MsHyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !self.rho.is_finite() {
            return Err(Error::config(format!(
                "rho must be finite, got {}",
                self.rho
            )));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::config(format!("eps must be >= 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// `log(1 + sum_i exp(x_i))`, stable for large positive or negative `x_i`.
fn log1p_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(0.0f64, f64::max);
    let sum: f64 = (-max).exp() + xs.map(|x| (x - max).exp()).sum::<f64>();
    max + sum.ln()
}

/// Positive component: `(1/alpha) log(1 + sum_p exp(-alpha (S_p - rho)))`.
/// Zero for an empty similarity list.
pub fn xi_pos(same_class_sims: &[f64], hp: &MsHyperParams) -> f64 {
    if same_class_sims.is_empty() {
        return 0.0;
    }
    log1p_sum_exp(same_class_sims.iter().map(|&s| -hp.alpha * (s - hp.rho))) / hp.alpha
}

/// Negative component: `(1/beta) log(1 + sum_n exp(beta (S_n - rho)))`.
/// Zero for an empty similarity list.
pub fn xi_neg(other_class_sims: &[f64], hp: &MsHyperParams) -> f64 {
    if other_class_sims.is_empty() {
        return 0.0;
    }
    log1p_sum_exp(other_class_sims.iter().map(|&s| hp.beta * (s - hp.rho))) / hp.beta
}

/// Dense pairwise dot-product matrix of the given embeddings.
pub fn similarity_matrix(embeddings: ArrayView2<'_, f64>) -> Array2<f64> {
    embeddings.dot(&embeddings.t())
}

/// Full-set multi-similarity loss: `sum_c (1/N^c) sum_a (xi_pos + xi_neg)`.
pub fn ms_loss(embeddings: ArrayView2<'_, f64>, labels: &[usize], hp: &MsHyperParams) -> f64 {
    let n = labels.len();
    let sim = similarity_matrix(embeddings);
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let mut total = 0.0;
    for a in 0..n {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                pos.push(sim[(a, j)]);
            } else {
                neg.push(sim[(a, j)]);
            }
        }
        total += (xi_pos(&pos, hp) + xi_neg(&neg, hp)) / counts[&labels[a]] as f64;
    }
    total
}

/// Per-anchor informative pair index sets over a batch.
///
/// Indices are batch-local. `positives[i]` lists same-label partners passing
/// the positive mining condition, `negatives[i]` lists different-label
/// partners passing the negative condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningResult {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl MiningResult {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }
}

/// Informative pair mining over a batch similarity matrix.
///
/// A negative `n` is informative for anchor `i` when
/// `S_in > min_p S_ip - eps` (strict); a positive `p` is informative when
/// `S_ip < max_n S_in + eps` (strict). Anchors with no same-label partner
/// treat the min over the empty set as +inf (every negative qualifies);
/// anchors with no different-label partner mine no positives.
pub fn mine_pairs(sim: ArrayView2<'_, f64>, labels: &[usize], eps: f64) -> MiningResult {
    let n = labels.len();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let mut min_pos = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                min_pos = min_pos.min(sim[(i, j)]);
            } else {
                max_neg = max_neg.max(sim[(i, j)]);
            }
        }
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if max_neg.is_finite() && sim[(i, j)] < max_neg + eps {
                    pos.push(j);
                }
            } else if !min_pos.is_finite() || sim[(i, j)] > min_pos - eps {
                // no same-class partner: the threshold is vacuous and every
                // negative is informative
                neg.push(j);
            }
        }
        positives.push(pos);
        negatives.push(neg);
    }
    MiningResult {
        positives,
        negatives,
    }
}

fn check_batch_weights(batch_ids: &[usize], w: &[f64], p: usize, k: usize) -> Result<()> {
    if batch_ids.len() != p * k {
        return Err(Error::contract(format!(
            "batch holds {} samples, expected P*K = {}",
            batch_ids.len(),
            p * k
        )));
    }
    for &id in batch_ids {
        let wi = *w.get(id).ok_or_else(|| {
            Error::contract(format!(
                "sample id {id} outside weight vector of length {}",
                w.len()
            ))
        })?;
        if !(0.0..=1.0).contains(&wi) {
            return Err(Error::contract(format!(
                "weight {wi} of sample {id} outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Weighted informative batch loss.
///
/// `batch_ids` maps batch-local indices to global sample ids (the weight
/// vector is indexed globally); `mining` and `sim` are batch-local. An
/// anchor term with an empty mined set contributes zero for that side.
pub fn weighted_batch_loss(
    batch_ids: &[usize],
    w: &[f64],
    mining: &MiningResult,
    sim: ArrayView2<'_, f64>,
    hp: &MsHyperParams,
    p: usize,
    k: usize,
) -> Result<f64> {
    check_batch_weights(batch_ids, w, p, k)?;
    let pk = batch_ids.len();
    let mut total = 0.0;
    for i in 0..pk {
        let wi = w[batch_ids[i]];
        let mut term = 0.0;
        let pos = &mining.positives[i];
        if !pos.is_empty() {
            let wsum: f64 = pos.iter().map(|&j| w[batch_ids[j]]).sum();
            let coeff = wsum / (pos.len() as f64 * hp.alpha);
            let lse = log1p_sum_exp(pos.iter().map(|&j| -hp.alpha * (sim[(i, j)] - hp.rho)));
            term += coeff * lse;
        }
        let neg = &mining.negatives[i];
        if !neg.is_empty() {
            let wsum: f64 = neg.iter().map(|&j| w[batch_ids[j]]).sum();
            let coeff = wsum / (neg.len() as f64 * hp.beta);
            let lse = log1p_sum_exp(neg.iter().map(|&j| hp.beta * (sim[(i, j)] - hp.rho)));
            term += coeff * lse;
        }
        total += wi * term;
    }
    Ok(total / pk as f64)
}

/// Stable `exp(x_j) / (1 + sum_i exp(x_i))` for every `j`.
fn softmax_ratios(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(0.0f64, f64::max);
    let denom: f64 = (-max).exp() + xs.iter().map(|&x| (x - max).exp()).sum::<f64>();
    xs.iter().map(|&x| (x - max).exp() / denom).collect()
}

/// Weighted informative batch loss together with its exact gradient with
/// respect to the batch embeddings (weights and mined sets held constant).
pub fn weighted_batch_loss_grad(
    batch_ids: &[usize],
    w: &[f64],
    mining: &MiningResult,
    embeddings: ArrayView2<'_, f64>,
    hp: &MsHyperParams,
    p: usize,
    k: usize,
) -> Result<(f64, Array2<f64>)> {
    check_batch_weights(batch_ids, w, p, k)?;
    let pk = batch_ids.len();
    if embeddings.nrows() != pk {
        return Err(Error::contract(format!(
            "embedding rows ({}) do not match batch size ({pk})",
            embeddings.nrows()
        )));
    }
    let sim = similarity_matrix(embeddings);
    let mut grad = Array2::<f64>::zeros(embeddings.raw_dim());
    let mut total = 0.0;
    let scale = 1.0 / pk as f64;
    for i in 0..pk {
        let wi = w[batch_ids[i]];
        let pos = &mining.positives[i];
        if !pos.is_empty() {
            let wsum: f64 = pos.iter().map(|&j| w[batch_ids[j]]).sum();
            let coeff = wsum / (pos.len() as f64 * hp.alpha);
            let xs: Vec<f64> = pos
                .iter()
                .map(|&j| -hp.alpha * (sim[(i, j)] - hp.rho))
                .collect();
            total += wi * coeff * log1p_sum_exp(xs.iter().copied());
            let ratios = softmax_ratios(&xs);
            for (&j, r) in pos.iter().zip(ratios) {
                // d/dS_ij of the positive log term is -alpha * r
                let g = scale * wi * coeff * (-hp.alpha) * r;
                for d in 0..embeddings.ncols() {
                    grad[(i, d)] += g * embeddings[(j, d)];
                    grad[(j, d)] += g * embeddings[(i, d)];
                }
            }
        }
        let neg = &mining.negatives[i];
        if !neg.is_empty() {
            let wsum: f64 = neg.iter().map(|&j| w[batch_ids[j]]).sum();
            let coeff = wsum / (neg.len() as f64 * hp.beta);
            let xs: Vec<f64> = neg
                .iter()
                .map(|&j| hp.beta * (sim[(i, j)] - hp.rho))
                .collect();
            total += wi * coeff * log1p_sum_exp(xs.iter().copied());
            let ratios = softmax_ratios(&xs);
            for (&j, r) in neg.iter().zip(ratios) {
                let g = scale * wi * coeff * hp.beta * r;
                for d in 0..embeddings.ncols() {
                    grad[(i, d)] += g * embeddings[(j, d)];
                    grad[(j, d)] += g * embeddings[(i, d)];
                }
            }
        }
    }
    Ok((total * scale, grad))
}
