//! The sample-weight subproblem: the denoising objective over `w in [0,1]^N`,
//! its exact coordinate derivative, doubly stochastic coordinate gradients,
//! box projection, the projection coordinate gradient solver, and test
//! oracles (grid search, the classic self-paced threshold rule).
//!
//! Objective, with `zeta(c) = sum of weights in class c` and per-sample
//! aggregates `xi+ / xi-` held fixed at the current model:
//!
//! ```text
//! L(w) = sum_c sum_a (w_a^c / N^c) [ (zeta(c) - w_a^c)/(N^c - 1) * xi+_a
//!        + (1/(C-1)) sum_{k != c} (zeta(k)/N^k) * xi-_a ]
//!      - lambda sum_c zeta(c)/N^c
//!      + (mu/(C-1)) sum_c sum_{k > c} (zeta(c)/N^c - zeta(k)/N^k)^2
//! ```

use crate::data::ClassIndex;
use crate::error::{Error, Result};
use crate::msloss::{self, MsHyperParams};
use ndarray::ArrayView2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use std::fmt::Write as _;

/// Per-sample loss aggregates evaluated over the full training set at a
/// fixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct XiTable {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl XiTable {
    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pos.len() != self.neg.len() {
            return Err(Error::contract("xi table component lengths differ"));
        }
        if self
            .pos
            .iter()
            .chain(self.neg.iter())
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::numeric(
                "xi table holds a negative or non-finite value",
            ));
        }
        Ok(())
    }

    /// All-zero table, useful for weight-dynamics tests.
    pub fn zeros(n: usize) -> Self {
        XiTable {
            pos: vec![0.0; n],
            neg: vec![0.0; n],
        }
    }
}

/// Exact full-set `xi+ / xi-` per sample from unit-norm embeddings.
pub fn build_xi_table(
    embeddings: ArrayView2<'_, f64>,
    labels: &[usize],
    hp: &MsHyperParams,
) -> XiTable {
    let n = labels.len();
    let sim = msloss::similarity_matrix(embeddings);
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for a in 0..n {
        let mut same = Vec::new();
        let mut other = Vec::new();
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                same.push(sim[(a, j)]);
            } else {
                other.push(sim[(a, j)]);
            }
        }
        pos.push(msloss::xi_pos(&same, hp));
        neg.push(msloss::xi_neg(&other, hp));
    }
    XiTable { pos, neg }
}

const ZETA_RECOMPUTE_INTERVAL: usize = 10_000;

/// Weight vector over `[0,1]^N` organized by class, with cached class sums
/// and the fixed per-sample aggregates the objective reads.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    w: Vec<f64>,
    index: ClassIndex,
    /// id -> (class, position within class)
    coords: Vec<(usize, usize)>,
    xi: XiTable,
    lambda: f64,
    mu: f64,
    zeta: Vec<f64>,
    steps_since_recompute: usize,
}

impl WeightState {
    /// Starts from the all-ones weight vector.
    pub fn new(index: ClassIndex, xi: XiTable, lambda: f64, mu: f64) -> Result<Self> {
        let n = index.total();
        Self::with_weights(index, xi, lambda, mu, vec![1.0; n])
    }

    pub fn with_weights(
        index: ClassIndex,
        xi: XiTable,
        lambda: f64,
        mu: f64,
        w: Vec<f64>,
    ) -> Result<Self> {
        if index.n_classes() < 2 {
            return Err(Error::contract(
                "weight subproblem needs at least 2 classes",
            ));
        }
        for (c, members) in index.iter() {
            if members.len() < 2 {
                return Err(Error::contract(format!(
                    "class {c} has {} sample(s); the objective divides by N^c - 1",
                    members.len()
                )));
            }
        }
        let n = index.total();
        xi.validate()?;
        if xi.len() != n {
            return Err(Error::contract(format!(
                "xi table covers {} samples, class index covers {n}",
                xi.len()
            )));
        }
        if w.len() != n {
            return Err(Error::contract(format!(
                "weight vector has length {}, expected {n}",
                w.len()
            )));
        }
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("weights must lie in [0, 1]"));
        }
        if !(lambda >= 0.0) {
            return Err(Error::contract(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        if !(mu >= 0.0) {
            return Err(Error::contract(format!("mu must be >= 0, got {mu}")));
        }
        let mut coords = vec![(0usize, 0usize); n];
        for (c, members) in index.iter() {
            for (a, &id) in members.iter().enumerate() {
                coords[id] = (c, a);
            }
        }
        let mut state = WeightState {
            w,
            index,
            coords,
            xi,
            lambda,
            mu,
            zeta: Vec::new(),
            steps_since_recompute: 0,
        };
        state.recompute_zeta();
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.index.n_classes()
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn class_index(&self) -> &ClassIndex {
        &self.index
    }

    pub fn xi(&self) -> &XiTable {
        &self.xi
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Cached `zeta(c)`, the weight sum of class `c`.
    pub fn zeta(&self, c: usize) -> f64 {
        self.zeta[c]
    }

    /// `zeta(c) / N^c`, the average weight of class `c`.
    pub fn class_avg(&self, c: usize) -> f64 {
        self.zeta[c] / self.index.size(c) as f64
    }

    /// Global sample id of coordinate `(c, a)`.
    pub fn global_id(&self, c: usize, a: usize) -> usize {
        self.index.class(c)[a]
    }

    /// `(class, within-class position)` of a sample id.
    pub fn coord_of(&self, id: usize) -> (usize, usize) {
        self.coords[id]
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0) {
            return Err(Error::contract(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        self.lambda = lambda;
        Ok(())
    }

    /// Swaps in fresh per-sample aggregates (same sample count).
    pub fn set_xi(&mut self, xi: XiTable) -> Result<()> {
        xi.validate()?;
        if xi.len() != self.len() {
            return Err(Error::contract(format!(
                "xi table covers {} samples, state covers {}",
                xi.len(),
                self.len()
            )));
        }
        self.xi = xi;
        Ok(())
    }

    /// Replaces the whole weight vector (validated) and refreshes the cache.
    pub fn set_weights(&mut self, w: Vec<f64>) -> Result<()> {
        if w.len() != self.len() {
            return Err(Error::contract(format!(
                "weight vector has length {}, expected {}",
                w.len(),
                self.len()
            )));
        }
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("weights must lie in [0, 1]"));
        }
        self.w = w;
        self.recompute_zeta();
        Ok(())
    }

    fn recompute_zeta(&mut self) {
        self.zeta = self
            .index
            .iter()
            .map(|(_, members)| members.iter().map(|&id| self.w[id]).sum())
            .collect();
        self.steps_since_recompute = 0;
    }

    /// Single-coordinate update with incremental cache maintenance; a full
    /// recompute every `ZETA_RECOMPUTE_INTERVAL` steps bounds drift.
    fn update_weight(&mut self, id: usize, value: f64) {
        let (c, _) = self.coords[id];
        self.zeta[c] += value - self.w[id];
        self.w[id] = value;
        self.steps_since_recompute += 1;
        if self.steps_since_recompute >= ZETA_RECOMPUTE_INTERVAL {
            self.recompute_zeta();
        }
    }
}

/// The denoising objective `L(theta, w; lambda)` at fixed aggregates.
pub fn objective(state: &WeightState) -> f64 {
    let c_total = state.n_classes();
    let r: Vec<f64> = (0..c_total).map(|c| state.class_avg(c)).collect();
    let r_sum: f64 = r.iter().sum();
    let mut loss = 0.0;
    for (c, members) in state.index.iter() {
        let nc = members.len() as f64;
        let zeta_c = state.zeta[c];
        let other_avg = (r_sum - r[c]) / (c_total - 1) as f64;
        for &id in members {
            let w_a = state.w[id];
            loss += (w_a / nc)
                * ((zeta_c - w_a) / (nc - 1.0) * state.xi.pos[id] + other_avg * state.xi.neg[id]);
        }
    }
    let age = r_sum * state.lambda;
    let mut balance = 0.0;
    for c in 0..c_total {
        for k in (c + 1)..c_total {
            balance += (r[c] - r[k]).powi(2);
        }
    }
    loss - age + state.mu / (c_total - 1) as f64 * balance
}

fn check_coordinate(state: &WeightState, c: usize, a: usize) -> Result<()> {
    if c >= state.n_classes() {
        return Err(Error::contract(format!(
            "class {c} outside [0, {})",
            state.n_classes()
        )));
    }
    if a >= state.index.size(c) {
        return Err(Error::contract(format!(
            "position {a} outside class {c} of size {}",
            state.index.size(c)
        )));
    }
    Ok(())
}

/// Exact partial derivative of the objective with respect to `w_a^c`.
pub fn coordinate_derivative(state: &WeightState, c: usize, a: usize) -> Result<f64> {
    check_coordinate(state, c, a)?;
    let id = state.global_id(c, a);
    let members = state.index.class(c);
    let nc = members.len() as f64;
    let c_total = state.n_classes();

    let mut pos_sum = 0.0;
    for &p in members {
        if p != id {
            pos_sum += state.w[p] * (state.xi.pos[p] + state.xi.pos[id]);
        }
    }

    let mut neg_sum = 0.0;
    for (k, others) in state.index.iter() {
        if k == c {
            continue;
        }
        let nk = others.len() as f64;
        let inner: f64 = others
            .iter()
            .map(|&n| state.w[n] * (state.xi.neg[n] + state.xi.neg[id]))
            .sum();
        neg_sum += inner / nk;
    }

    let r_c = state.class_avg(c);
    let others_avg: f64 = (0..c_total)
        .filter(|&k| k != c)
        .map(|k| state.class_avg(k))
        .sum::<f64>()
        / (c_total - 1) as f64;
    let balance = 2.0 * state.mu * (r_c - others_avg);

    Ok((pos_sum / (nc - 1.0) + neg_sum / (c_total - 1) as f64 + balance - state.lambda) / nc)
}

/// All coordinate derivatives at once, sharing the class-sum precomputation.
pub fn full_gradient(state: &WeightState) -> Vec<f64> {
    let c_total = state.n_classes();
    let mut sum_w_xi_pos = vec![0.0; c_total];
    let mut a_neg = vec![0.0; c_total]; // (1/N^k) sum w xi-
    for (c, members) in state.index.iter() {
        for &id in members {
            sum_w_xi_pos[c] += state.w[id] * state.xi.pos[id];
            a_neg[c] += state.w[id] * state.xi.neg[id];
        }
        a_neg[c] /= members.len() as f64;
    }
    let a_total: f64 = a_neg.iter().sum();
    let r: Vec<f64> = (0..c_total).map(|c| state.class_avg(c)).collect();
    let r_sum: f64 = r.iter().sum();

    let mut grad = vec![0.0; state.len()];
    for (c, members) in state.index.iter() {
        let nc = members.len() as f64;
        let zeta_c = state.zeta[c];
        let others_avg = (r_sum - r[c]) / (c_total - 1) as f64;
        let balance = 2.0 * state.mu * (r[c] - others_avg);
        for &id in members {
            let xi_p = state.xi.pos[id];
            let xi_n = state.xi.neg[id];
            let pos_sum = (sum_w_xi_pos[c] - state.w[id] * xi_p) + (zeta_c - state.w[id]) * xi_p;
            let neg_sum = (a_total - a_neg[c]) + (r_sum - r[c]) * xi_n;
            grad[id] = (pos_sum / (nc - 1.0) + neg_sum / (c_total - 1) as f64 + balance
                - state.lambda)
                / nc;
        }
    }
    grad
}

/// Balance component `G_b` shared by the stochastic and exhaustive routes.
fn balance_term(state: &WeightState, c: usize) -> f64 {
    let c_total = state.n_classes();
    let others: f64 = (0..c_total)
        .filter(|&k| k != c)
        .map(|k| state.class_avg(k))
        .sum::<f64>()
        / (c_total - 1) as f64;
    2.0 * state.mu * (state.class_avg(c) - others)
}

/// The doubly stochastic coordinate gradient `G(w_a^c)` with `classes`
/// other classes and `weights` weights per sampled set, both drawn uniformly
/// without replacement.
pub fn stochastic_gradient<R: Rng>(
    state: &WeightState,
    c: usize,
    a: usize,
    classes: usize,
    weights: usize,
    rng: &mut R,
) -> Result<f64> {
    check_coordinate(state, c, a)?;
    let c_total = state.n_classes();
    if classes == 0 || classes > c_total - 1 {
        return Err(Error::contract(format!(
            "sampled class count {classes} outside [1, {}]",
            c_total - 1
        )));
    }
    let members = state.index.class(c);
    if weights == 0 || weights > members.len() - 1 {
        return Err(Error::contract(format!(
            "sampled weight count {weights} outside [1, {}] for class {c}",
            members.len() - 1
        )));
    }
    let id = state.global_id(c, a);
    let xi_p_a = state.xi.pos[id];
    let xi_n_a = state.xi.neg[id];

    // positives: `weights` same-class ids, excluding the anchor coordinate
    let pool: Vec<usize> = members.iter().copied().filter(|&p| p != id).collect();
    let picked = sample_indices(rng, pool.len(), weights);
    let g_pos: f64 = picked
        .iter()
        .map(|i| {
            let p = pool[i];
            state.w[p] * (state.xi.pos[p] + xi_p_a)
        })
        .sum::<f64>()
        / weights as f64;

    // negatives: `classes` other classes, `weights` ids per class
    let other_classes: Vec<usize> = (0..c_total).filter(|&k| k != c).collect();
    let class_picks = sample_indices(rng, other_classes.len(), classes);
    let mut g_neg = 0.0;
    for ci in class_picks.iter() {
        let k = other_classes[ci];
        let others = state.index.class(k);
        if weights > others.len() {
            return Err(Error::contract(format!(
                "sampled weight count {weights} exceeds class {k} of size {}",
                others.len()
            )));
        }
        let ids = sample_indices(rng, others.len(), weights);
        let inner: f64 = ids
            .iter()
            .map(|i| {
                let n = others[i];
                state.w[n] * (state.xi.neg[n] + xi_n_a)
            })
            .sum();
        g_neg += inner / weights as f64;
    }
    g_neg /= classes as f64;

    let nc = members.len() as f64;
    Ok((g_pos + g_neg + balance_term(state, c) - state.lambda) / nc)
}

/// The `P = C-1, K = max` sampling mode: every sample mean becomes an exact
/// mean over its full index set.
pub fn exhaustive_gradient(state: &WeightState, c: usize, a: usize) -> Result<f64> {
    check_coordinate(state, c, a)?;
    let id = state.global_id(c, a);
    let members = state.index.class(c);
    let nc = members.len() as f64;
    let c_total = state.n_classes();

    let g_pos: f64 = members
        .iter()
        .filter(|&&p| p != id)
        .map(|&p| state.w[p] * (state.xi.pos[p] + state.xi.pos[id]))
        .sum::<f64>()
        / (nc - 1.0);

    let mut g_neg = 0.0;
    for (k, others) in state.index.iter() {
        if k == c {
            continue;
        }
        let inner: f64 = others
            .iter()
            .map(|&n| state.w[n] * (state.xi.neg[n] + state.xi.neg[id]))
            .sum();
        g_neg += inner / others.len() as f64;
    }
    g_neg /= (c_total - 1) as f64;

    Ok((g_pos + g_neg + balance_term(state, c) - state.lambda) / nc)
}

/// Componentwise clamp to `[0, 1]`.
pub fn project_box(w: &[f64]) -> Vec<f64> {
    w.iter().map(|&v| v.clamp(0.0, 1.0)).collect()
}

/// Projected gradient of Definition-1 form: `(w - P(w - gamma g)) / gamma`.
/// Its norm measures stationarity on the box.
pub fn projected_gradient(w: &[f64], g: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0) {
        return Err(Error::contract(format!(
            "stepsize must be > 0, got {gamma}"
        )));
    }
    if w.len() != g.len() {
        return Err(Error::contract(format!(
            "weight and gradient lengths differ: {} vs {}",
            w.len(),
            g.len()
        )));
    }
    Ok(w.iter()
        .zip(g)
        .map(|(&wi, &gi)| (wi - (wi - gamma * gi).clamp(0.0, 1.0)) / gamma)
        .collect())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Stepsize schedule for the coordinate solver. Produced stepsizes are
/// positive and nonincreasing.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum StepSchedule {
    Constant { gamma0: f64 },
    HarmonicDecay { gamma0: f64, horizon: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let (gamma0, horizon) = match *self {
            StepSchedule::Constant { gamma0 } => (gamma0, 1.0),
            StepSchedule::HarmonicDecay { gamma0, horizon } => (gamma0, horizon),
        };
        if !(gamma0 > 0.0) {
            return Err(Error::config(format!("gamma0 must be > 0, got {gamma0}")));
        }
        if !(horizon > 0.0) {
            return Err(Error::config(format!(
                "decay horizon must be > 0, got {horizon}"
            )));
        }
        Ok(())
    }

    /// Stepsize at 0-based iteration `t`.
    pub fn gamma(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { gamma0 } => gamma0,
            StepSchedule::HarmonicDecay { gamma0, horizon } => gamma0 / (1.0 + t as f64 / horizon),
        }
    }

    /// Harmonic decay with `gamma0 = 1 / Lhat`, where `Lhat` is the
    /// empirical curvature estimate
    /// `max over classes of 2 (max xi+ + max xi-) + 2 mu`.
    pub fn harmonic_for(xi: &XiTable, index: &ClassIndex, mu: f64, horizon: f64) -> Self {
        let mut lhat: f64 = 0.0;
        for (_, members) in index.iter() {
            let max_pos = members.iter().map(|&id| xi.pos[id]).fold(0.0f64, f64::max);
            let max_neg = members.iter().map(|&id| xi.neg[id]).fold(0.0f64, f64::max);
            lhat = lhat.max(2.0 * (max_pos + max_neg) + 2.0 * mu);
        }
        StepSchedule::HarmonicDecay {
            gamma0: 1.0 / lhat.max(1e-3),
            horizon,
        }
    }
}

/// How the solver samples each stochastic gradient.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "plan", rename_all = "kebab-case")]
pub enum SamplingPlan {
    /// Exact means over full index sets; the gradient is deterministic.
    Exhaustive,
    /// Fixed sampling sizes per step.
    Stochastic { classes: usize, weights: usize },
    /// Sizes grow by one every `grow_every` steps (clamped to each
    /// coordinate's valid range) until the plan reaches exhaustive sampling.
    Growing {
        classes0: usize,
        weights0: usize,
        grow_every: usize,
    },
}

/// One recorded solver step (objective and projected-gradient norm are
/// computed with the exact full gradient, only at trace strides).
#[derive(Debug, Clone, PartialEq)]
pub struct SolveTraceRow {
    pub iter: usize,
    pub coordinate: usize,
    pub g: f64,
    pub gamma: f64,
    pub objective: f64,
    pub proj_grad_norm: f64,
}

/// Trace of a solver run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub rows: Vec<SolveTraceRow>,
    pub final_objective: f64,
    pub final_proj_grad_norm: f64,
}

impl SolveTrace {
    /// CSV with header `iter,coordinate,G,gamma,objective,proj_grad_norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,coordinate,G,gamma,objective,proj_grad_norm\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iter, r.coordinate, r.g, r.gamma, r.objective, r.proj_grad_norm
            );
        }
        out
    }

    /// Smallest projected-gradient norm seen at any trace point.
    pub fn min_proj_grad_norm(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.proj_grad_norm)
            .fold(self.final_proj_grad_norm, f64::min)
    }
}

fn trace_point(state: &WeightState, gamma: f64) -> (f64, f64) {
    let grad = full_gradient(state);
    let pg =
        projected_gradient(state.weights(), &grad, gamma).expect("gamma validated by schedule");
    (objective(state), l2_norm(&pg))
}

/// Doubly stochastic projection coordinate gradient descent.
///
/// Each iteration samples one coordinate uniformly, estimates its gradient
/// per the sampling plan, and projects the updated coordinate back onto
/// `[0, 1]`. The trace records objective and projected-gradient norm every
/// `trace_stride` iterations (0 disables intermediate rows); the final point
/// is always recorded.
pub fn solve_weights<R: Rng>(
    state: &mut WeightState,
    iters: usize,
    schedule: &StepSchedule,
    plan: SamplingPlan,
    rng: &mut R,
    trace_stride: usize,
) -> Result<SolveTrace> {
    schedule.validate()?;
    let n = state.len();
    let mut trace = SolveTrace::default();
    for t in 0..iters {
        let id = rng.gen_range(0..n);
        let (c, a) = state.coord_of(id);
        let g = match plan {
            SamplingPlan::Exhaustive => exhaustive_gradient(state, c, a)?,
            SamplingPlan::Stochastic { classes, weights } => {
                stochastic_gradient(state, c, a, classes, weights, rng)?
            }
            SamplingPlan::Growing {
                classes0,
                weights0,
                grow_every,
            } => {
                if grow_every == 0 {
                    return Err(Error::config("grow_every must be positive"));
                }
                let inc = t / grow_every;
                let c_total = state.n_classes();
                let max_classes = c_total - 1;
                let classes = (classes0 + inc).min(max_classes);
                let own_cap = state.class_index().size(c) - 1;
                let other_cap = (0..c_total)
                    .filter(|&k| k != c)
                    .map(|k| state.class_index().size(k))
                    .min()
                    .unwrap_or(1);
                let cap = own_cap.min(other_cap);
                let weights = (weights0 + inc).min(cap);
                if classes == max_classes && weights >= cap {
                    exhaustive_gradient(state, c, a)?
                } else {
                    stochastic_gradient(state, c, a, classes.max(1), weights.max(1), rng)?
                }
            }
        };
        if !g.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite coordinate gradient at iteration {t}"
            )));
        }
        let gamma = schedule.gamma(t);
        let updated = (state.weights()[id] - gamma * g).clamp(0.0, 1.0);
        state.update_weight(id, updated);
        if trace_stride > 0 && t % trace_stride == 0 {
            let (obj, norm) = trace_point(state, gamma);
            trace.rows.push(SolveTraceRow {
                iter: t,
                coordinate: id,
                g,
                gamma,
                objective: obj,
                proj_grad_norm: norm,
            });
        }
    }
    let gamma_final = schedule.gamma(iters.saturating_sub(1));
    let (obj, norm) = trace_point(state, gamma_final);
    trace.final_objective = obj;
    trace.final_proj_grad_norm = norm;
    Ok(trace)
}

/// Exhaustive grid search over `{0, res, 2 res, ..., 1}^N`, returning the
/// best grid point; ties keep the lexicographically smallest vector.
/// Guarded: refuses grids beyond `10^7` points or `N > 8`.
pub fn brute_force_minimize(state: &WeightState, resolution: f64) -> Result<(Vec<f64>, f64)> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::config(format!(
            "grid resolution must be in (0, 1], got {resolution}"
        )));
    }
    let n = state.len();
    if n > 8 {
        return Err(Error::contract(format!(
            "grid search is guarded to N <= 8 coordinates, got {n}"
        )));
    }
    let levels = (1.0 / resolution + 1e-9).floor() as usize + 1;
    let grid_points = (levels as f64).powi(n as i32);
    if grid_points > 1e7 {
        return Err(Error::contract(format!(
            "grid of {grid_points:.3e} points exceeds the 1e7 guard"
        )));
    }
    let values: Vec<f64> = (0..levels)
        .map(|k| (k as f64 * resolution).min(1.0))
        .collect();

    let mut probe = state.clone();
    let mut indices = vec![0usize; n];
    let mut best_w = vec![0.0; n];
    let mut best = f64::INFINITY;
    loop {
        let w: Vec<f64> = indices.iter().map(|&k| values[k]).collect();
        probe.set_weights(w.clone())?;
        let obj = objective(&probe);
        if obj < best {
            best = obj;
            best_w = w;
        }
        // odometer: last coordinate fastest keeps enumeration lexicographic
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok((best_w, best));
            }
            pos -= 1;
            if indices[pos] + 1 < levels {
                indices[pos] += 1;
                break;
            }
            indices[pos] = 0;
        }
    }
}

/// The classic self-paced threshold rule: weight 1 when the loss is within
/// the age parameter, 0 otherwise.
pub fn classic_spl_weights(losses: &[f64], lambda: f64) -> Vec<f64> {
    losses
        .iter()
        .map(|&l| if l <= lambda { 1.0 } else { 0.0 })
        .collect()
}

/// Empirical estimate of the stochastic-gradient noise: the root mean
/// squared deviation between sampled gradients and the exact coordinate
/// derivative, over uniformly drawn coordinates. A diagnostic only; no
/// claim is made that it bounds the theory's variance sequence.
pub fn gradient_noise_estimate<R: Rng>(
    state: &WeightState,
    classes: usize,
    weights: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials == 0 {
        return Err(Error::contract("noise estimate needs at least one trial"));
    }
    let n = state.len();
    let mut total = 0.0;
    for _ in 0..trials {
        let id = rng.gen_range(0..n);
        let (c, a) = state.coord_of(id);
        let g = stochastic_gradient(state, c, a, classes, weights, rng)?;
        let exact = coordinate_derivative(state, c, a)?;
        total += (g - exact).powi(2);
    }
    Ok((total / trials as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split_by_class, SyntheticSpec};
    use itertools::Itertools;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Class index over two classes of the given sizes.
    fn index_of_sizes(sizes: &[usize]) -> ClassIndex {
        let mut labels = Vec::new();
        for (c, &s) in sizes.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c, s));
        }
        let n = labels.len();
        let ds =
            crate::data::Dataset::new(ndarray::Array2::zeros((n, 1)), labels, sizes.len()).unwrap();
        split_by_class(&ds)
    }

    fn uniform_state(
        sizes: &[usize],
        xi_pos: f64,
        xi_neg: f64,
        lambda: f64,
        mu: f64,
    ) -> WeightState {
        let index = index_of_sizes(sizes);
        let n = index.total();
        let xi = XiTable {
            pos: vec![xi_pos; n],
            neg: vec![xi_neg; n],
        };
        WeightState::new(index, xi, lambda, mu).unwrap()
    }

    fn random_state(sizes: &[usize], lambda: f64, mu: f64, seed: u64) -> WeightState {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let index = index_of_sizes(sizes);
        let n = index.total();
        let xi = XiTable {
            pos: (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
            neg: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        };
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        WeightState::with_weights(index, xi, lambda, mu, w).unwrap()
    }

    #[test]
    fn objective_zero_weights_is_zero() {
        let mut state = uniform_state(&[3, 3], 0.7, 0.4, 2.0, 3.0);
        state.set_weights(vec![0.0; 6]).unwrap();
        assert_eq!(objective(&state), 0.0);
    }

    #[test]
    fn objective_unit_weights_hand_value() {
        // C=2, N^c=2, xi+ = 0.5, xi- = 0.3, lambda = 1: L = 2(0.5+0.3) - 2
        let state = uniform_state(&[2, 2], 0.5, 0.3, 1.0, 4.0);
        assert!((objective(&state) - (-0.4)).abs() < 1e-12);
    }

    #[test]
    fn objective_unit_weights_zero_xi() {
        let state = uniform_state(&[2, 3, 4], 0.0, 0.0, 2.0, 1.0);
        assert!((objective(&state) - (-6.0)).abs() < 1e-12);
    }

    #[test]
    fn derivative_hand_value() {
        let state = uniform_state(&[2, 2], 0.5, 0.3, 1.0, 1.0);
        let d = coordinate_derivative(&state, 0, 0).unwrap();
        assert!((d - 0.3).abs() < 1e-12, "{d}");
    }

    #[test]
    fn derivative_reduces_to_age_term() {
        let mut state = uniform_state(&[3, 3], 0.0, 0.0, 1.7, 2.5);
        state.set_weights(vec![0.4; 6]).unwrap();
        for c in 0..2 {
            for a in 0..3 {
                let d = coordinate_derivative(&state, c, a).unwrap();
                assert!((d - (-1.7 / 3.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let state = random_state(&[4, 4, 4], 0.8, 1.3, 99);
        let step = 1e-6;
        for c in 0..3 {
            for a in 0..4 {
                let id = state.global_id(c, a);
                let analytic = coordinate_derivative(&state, c, a).unwrap();
                let mut plus = state.clone();
                let mut w = plus.weights().to_vec();
                w[id] += step;
                plus.set_weights(w).unwrap();
                let mut minus = state.clone();
                let mut w = minus.weights().to_vec();
                w[id] -= step;
                minus.set_weights(w).unwrap();
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * step);
                assert!(
                    (analytic - fd).abs() / fd.abs().max(1e-9) < 1e-7,
                    "({c},{a}): {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn full_gradient_agrees_with_per_coordinate() {
        let state = random_state(&[3, 5, 2], 0.6, 0.9, 123);
        let grad = full_gradient(&state);
        for c in 0..3 {
            for a in 0..state.class_index().size(c) {
                let id = state.global_id(c, a);
                let d = coordinate_derivative(&state, c, a).unwrap();
                assert!((grad[id] - d).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn exhaustive_gradient_equals_derivative() {
        let state = random_state(&[3, 4], 0.5, 0.7, 7);
        for c in 0..2 {
            for a in 0..state.class_index().size(c) {
                let g = exhaustive_gradient(&state, c, a).unwrap();
                let d = coordinate_derivative(&state, c, a).unwrap();
                assert!((g - d).abs() < 1e-13, "({c},{a}): {g} vs {d}");
            }
        }
    }

    #[test]
    fn stochastic_gradient_with_zero_xi_ignores_sampling() {
        let mut state = uniform_state(&[4, 4], 0.0, 0.0, 1.2, 0.0);
        state.set_weights(vec![0.5; 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..5 {
            let g = stochastic_gradient(&state, 0, 1, 1, 2, &mut rng).unwrap();
            assert!((g - (-1.2 / 4.0)).abs() < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn stochastic_gradient_rejects_oversized_samples() {
        let state = uniform_state(&[3, 3], 0.1, 0.1, 0.5, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(stochastic_gradient(&state, 0, 0, 2, 2, &mut rng).is_err());
        assert!(stochastic_gradient(&state, 0, 0, 1, 3, &mut rng).is_err());
    }

    // Enumerate every (positive subset, class subset, per-class weight
    // subset) choice and average: the expectation must equal the exact
    // derivative.
    #[test]
    fn enumerated_expectation_matches_derivative() {
        let state = random_state(&[3, 3], 0.4, 0.8, 5);
        let (c, a) = (0usize, 1usize);
        let (classes, weights) = (1usize, 1usize);
        let id = state.global_id(c, a);
        let members = state.class_index().class(c).to_vec();
        let pool: Vec<usize> = members.into_iter().filter(|&p| p != id).collect();
        let other_classes: Vec<usize> = (0..state.n_classes()).filter(|&k| k != c).collect();

        let nc = state.class_index().size(c) as f64;
        let mut total = 0.0;
        let mut count = 0usize;
        for pos_subset in pool.iter().copied().combinations(weights) {
            let g_pos: f64 = pos_subset
                .iter()
                .map(|&p| state.weights()[p] * (state.xi().pos[p] + state.xi().pos[id]))
                .sum::<f64>()
                / weights as f64;
            for class_subset in other_classes.iter().copied().combinations(classes) {
                // per-class weight subsets: cartesian product over classes
                let per_class: Vec<Vec<Vec<usize>>> = class_subset
                    .iter()
                    .map(|&k| {
                        state
                            .class_index()
                            .class(k)
                            .iter()
                            .copied()
                            .combinations(weights)
                            .collect()
                    })
                    .collect();
                for combo in per_class.into_iter().multi_cartesian_product() {
                    let mut g_neg = 0.0;
                    for subset in &combo {
                        let inner: f64 = subset
                            .iter()
                            .map(|&n| state.weights()[n] * (state.xi().neg[n] + state.xi().neg[id]))
                            .sum();
                        g_neg += inner / weights as f64;
                    }
                    g_neg /= classes as f64;
                    total += (g_pos + g_neg + balance_term(&state, c) - state.lambda()) / nc;
                    count += 1;
                }
            }
        }
        let expectation = total / count as f64;
        let derivative = coordinate_derivative(&state, c, a).unwrap();
        assert!(
            (expectation - derivative).abs() < 1e-12,
            "{expectation} vs {derivative}"
        );
    }

    #[test]
    fn box_projection_examples() {
        assert_eq!(project_box(&[-0.2, 0.5, 1.7]), vec![0.0, 0.5, 1.0]);
        let inside = vec![0.1, 0.9, 0.5];
        assert_eq!(project_box(&inside), inside);
        let once = project_box(&[-3.0, 0.2, 2.0]);
        assert_eq!(project_box(&once), once);
    }

    #[test]
    fn projected_gradient_examples() {
        // interior point, step stays inside: result equals g
        let pg = projected_gradient(&[0.5, 0.5], &[0.3, -0.2], 0.1).unwrap();
        assert!((pg[0] - 0.3).abs() < 1e-15);
        assert!((pg[1] + 0.2).abs() < 1e-15);

        // boundary absorbs an ascent direction
        let pg = projected_gradient(&[1.0], &[-1.0], 0.1).unwrap();
        assert_eq!(pg[0], 0.0);

        let pg = projected_gradient(&[0.3, 0.9], &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(pg, vec![0.0, 0.0]);

        assert!(projected_gradient(&[0.5], &[0.1], 0.0).is_err());
    }

    #[test]
    fn schedule_is_positive_and_nonincreasing() {
        let s = StepSchedule::HarmonicDecay {
            gamma0: 0.5,
            horizon: 100.0,
        };
        let mut prev = f64::INFINITY;
        for t in 0..1000 {
            let g = s.gamma(t);
            assert!(g > 0.0 && g <= prev);
            prev = g;
        }
    }

    #[test]
    fn solver_zero_iterations_keeps_state() {
        let mut state = random_state(&[3, 3], 0.5, 1.0, 3);
        let before = state.weights().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        solve_weights(
            &mut state,
            0,
            &StepSchedule::Constant { gamma0: 0.1 },
            SamplingPlan::Exhaustive,
            &mut rng,
            0,
        )
        .unwrap();
        assert_eq!(state.weights(), &before[..]);
    }

    #[test]
    fn solver_trace_respects_stride() {
        let mut state = random_state(&[3, 3], 0.5, 1.0, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = solve_weights(
            &mut state,
            5,
            &StepSchedule::Constant { gamma0: 0.05 },
            SamplingPlan::Exhaustive,
            &mut rng,
            2,
        )
        .unwrap();
        let iters: Vec<usize> = trace.rows.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 2, 4]);
        let csv = trace.to_csv();
        assert!(csv.starts_with("iter,coordinate,G,gamma,objective,proj_grad_norm\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!(trace.min_proj_grad_norm() <= trace.final_proj_grad_norm);
    }

    #[test]
    fn huge_lambda_drives_weights_to_one() {
        // lambda exceeding every achievable G_p + G_n + G_b makes the
        // gradient strictly negative, so visited coordinates hit the upper
        // boundary.
        let index = index_of_sizes(&[3, 3]);
        let xi = XiTable {
            pos: vec![0.2; 6],
            neg: vec![0.1; 6],
        };
        let mut state = WeightState::with_weights(index, xi, 50.0, 0.0, vec![0.25; 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        solve_weights(
            &mut state,
            400,
            &StepSchedule::Constant { gamma0: 0.5 },
            SamplingPlan::Stochastic {
                classes: 1,
                weights: 2,
            },
            &mut rng,
            0,
        )
        .unwrap();
        assert!(
            state.weights().iter().all(|&w| w == 1.0),
            "{:?}",
            state.weights()
        );
    }

    #[test]
    fn solver_stays_feasible_and_cache_consistent() {
        let mut state = random_state(&[4, 5, 3], 0.7, 1.5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let schedule =
            StepSchedule::harmonic_for(state.xi(), state.class_index(), state.mu(), 500.0);
        solve_weights(
            &mut state,
            2000,
            &schedule,
            SamplingPlan::Stochastic {
                classes: 2,
                weights: 2,
            },
            &mut rng,
            0,
        )
        .unwrap();
        assert!(state.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
        for c in 0..3 {
            let fresh: f64 = state
                .class_index()
                .class(c)
                .iter()
                .map(|&id| state.weights()[id])
                .sum();
            assert!((state.zeta(c) - fresh).abs() < 1e-12);
        }
    }

    // The subproblem is a nonconvex quadratic: a single coordinate-descent
    // trajectory converges to a stationary point, and which basin it lands
    // in depends on the coordinate visit order. Restarting from the
    // canonical corners and the midpoint covers the basins on instances
    // this small; the best run must match the global grid search.
    #[test]
    fn solver_reaches_grid_minimum_on_small_instance() {
        // N = 5 keeps the 0.05-resolution grid inside the oracle guard
        let base = random_state(&[3, 2], 0.5, 1.0, 42);
        let (_, oracle) = brute_force_minimize(&base, 0.05).unwrap();
        let schedule = StepSchedule::harmonic_for(base.xi(), base.class_index(), base.mu(), 1250.0);
        let n = base.len();
        let mut best = f64::INFINITY;
        let mut best_pg = f64::INFINITY;
        for (i, w0) in [vec![1.0; n], vec![0.0; n], vec![0.5; n]]
            .into_iter()
            .enumerate()
        {
            let mut state = base.clone();
            state.set_weights(w0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let trace = solve_weights(
                &mut state,
                5000,
                &schedule,
                SamplingPlan::Exhaustive,
                &mut rng,
                0,
            )
            .unwrap();
            if trace.final_objective < best {
                best = trace.final_objective;
                best_pg = trace.final_proj_grad_norm;
            }
        }
        assert!(best <= oracle + 1e-3, "solver {best} vs grid {oracle}");
        // and the grid value is a lower envelope for any solver output
        assert!(oracle <= best + 1e-3);
        assert!(best_pg <= 1e-4, "{best_pg}");
    }

    #[test]
    fn balance_pressure_equalizes_class_averages() {
        // xi = 0 and lambda = 0 leave only the balance term; unequal class
        // sizes start with unequal averages.
        let index = index_of_sizes(&[2, 4]);
        let xi = XiTable::zeros(6);
        let mut state =
            WeightState::with_weights(index, xi, 0.0, 1.0, vec![1.0, 1.0, 0.1, 0.1, 0.1, 0.1])
                .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        solve_weights(
            &mut state,
            4000,
            &StepSchedule::HarmonicDecay {
                gamma0: 1.0,
                horizon: 1000.0,
            },
            SamplingPlan::Exhaustive,
            &mut rng,
            0,
        )
        .unwrap();
        assert!(
            (state.class_avg(0) - state.class_avg(1)).abs() < 1e-3,
            "{} vs {}",
            state.class_avg(0),
            state.class_avg(1)
        );
    }

    #[test]
    fn larger_lambda_never_lowers_average_weight() {
        // mu = 0 so the update map is monotone in lambda under a shared
        // rng stream.
        let base = random_state(&[4, 4], 0.5, 0.0, 31);
        let schedule = StepSchedule::HarmonicDecay {
            gamma0: 0.2,
            horizon: 500.0,
        };
        let maw = |lambda: f64| {
            let mut state = base.clone();
            state.set_lambda(lambda).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            solve_weights(
                &mut state,
                3000,
                &schedule,
                SamplingPlan::Stochastic {
                    classes: 1,
                    weights: 2,
                },
                &mut rng,
                0,
            )
            .unwrap();
            (state.class_avg(0) + state.class_avg(1)) / 2.0
        };
        let low = maw(0.4);
        let high = maw(1.1);
        assert!(high >= low - 1e-6, "{high} vs {low}");
    }

    #[test]
    fn growing_plan_caps_at_exhaustive() {
        let mut state = random_state(&[3, 3, 3], 0.6, 0.5, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        solve_weights(
            &mut state,
            500,
            &StepSchedule::Constant { gamma0: 0.05 },
            SamplingPlan::Growing {
                classes0: 1,
                weights0: 1,
                grow_every: 50,
            },
            &mut rng,
            0,
        )
        .unwrap();
        assert!(state.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn grid_oracle_trivial_cases() {
        // linear decreasing objective: all-ones wins
        let state = uniform_state(&[2, 2], 0.0, 0.0, 0.7, 0.0);
        let (w, obj) = brute_force_minimize(&state, 0.25).unwrap();
        assert_eq!(w, vec![1.0; 4]);
        assert!((obj - (-1.4)).abs() < 1e-12);

        // lambda = 0, mu > 0: every balanced vector ties at 0, lexicographic
        // tie-break returns all-zeros
        let state = uniform_state(&[2, 2], 0.0, 0.0, 0.0, 2.0);
        let (w, obj) = brute_force_minimize(&state, 0.25).unwrap();
        assert_eq!(w, vec![0.0; 4]);
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn grid_oracle_guard_reports_size() {
        let state = uniform_state(&[4, 4], 0.1, 0.1, 0.5, 0.5);
        let err = brute_force_minimize(&state, 0.05).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
    }

    #[test]
    fn classic_spl_threshold_rule() {
        assert_eq!(classic_spl_weights(&[0.5, 2.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(classic_spl_weights(&[0.5, 2.0], 2.0), vec![1.0, 1.0]);
        assert_eq!(classic_spl_weights(&[0.5, 2.0], 0.4), vec![0.0, 0.0]);
    }

    #[test]
    fn noise_estimate_tracks_sampling_coarseness() {
        let state = random_state(&[4, 4], 0.6, 0.8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fine = gradient_noise_estimate(&state, 1, 3, 40, &mut rng).unwrap();
        let coarse = gradient_noise_estimate(&state, 1, 1, 40, &mut rng).unwrap();
        assert!(fine > 0.0);
        assert!(
            coarse > fine,
            "coarser sampling should be noisier: {coarse} vs {fine}"
        );
        // degenerate subproblem: every sampled gradient is exact
        let flat = uniform_state(&[3, 3], 0.0, 0.0, 1.0, 0.0);
        let zero = gradient_noise_estimate(&flat, 1, 2, 20, &mut rng).unwrap();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn xi_table_from_embeddings_is_finite_and_consistent() {
        let spec = SyntheticSpec {
            classes: 3,
            per_class: 5,
            dim: 2,
            separation: 4.0,
            std_dev: 0.3,
        };
        let ds = generate_synthetic(&spec, 0).unwrap();
        let model = crate::embed::EmbeddingModel::with_default_arch(2, 4, 0).unwrap();
        let emb = model.forward_batch(ds.features()).unwrap();
        let xi = build_xi_table(emb.view(), ds.labels(), &MsHyperParams::default());
        xi.validate().unwrap();
        assert_eq!(xi.len(), ds.len());
        // reduction identity: sum of per-class means of (xi+ + xi-) equals
        // the full MS objective
        let index = split_by_class(&ds);
        let mut total = 0.0;
        for (_, members) in index.iter() {
            for &id in members {
                total += (xi.pos[id] + xi.neg[id]) / members.len() as f64;
            }
        }
        let direct = msloss::ms_loss(emb.view(), ds.labels(), &MsHyperParams::default());
        assert!((total - direct).abs() < 1e-12);
    }
}
