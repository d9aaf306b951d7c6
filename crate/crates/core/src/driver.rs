//! The alternating training loop: fix the sample weights and update the
//! embedding model on weighted informative batches, then fix the model,
//! rebuild the per-sample loss aggregates, and re-solve the weights; grow
//! the age parameter after each alternation. The plain multi-similarity
//! baseline is the same pipeline with weights pinned to one.

use crate::data::{split_by_class, ClassIndex, Dataset};
use crate::derive_seed;
use crate::embed::{Activation, EmbeddingModel};
use crate::error::{Error, Result};
use crate::eval;
use crate::msloss::{self, MsHyperParams};
use crate::weights::{
    build_xi_table, objective, solve_weights, SamplingPlan, SolveTrace, SolveTraceRow,
    StepSchedule, WeightState, XiTable,
};
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

/// Geometric growth of the age parameter, capped at `lambda_max`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AgeSchedule {
    pub lambda0: f64,
    pub multiplier: f64,
    pub lambda_max: f64,
}

impl AgeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0) {
            return Err(Error::config(format!(
                "initial age parameter must be > 0, got {}",
                self.lambda0
            )));
        }
        if !(self.multiplier > 1.0) {
            return Err(Error::config(format!(
                "age multiplier must be > 1, got {}",
                self.multiplier
            )));
        }
        if !(self.lambda_max >= self.lambda0) {
            return Err(Error::config(format!(
                "maximum age parameter {} is below the initial value {}",
                self.lambda_max, self.lambda0
            )));
        }
        Ok(())
    }

    /// `lambda^t = min(multiplier * lambda^{t-1}, lambda_max)`.
    pub fn advance(&self, lambda: f64) -> f64 {
        (self.multiplier * lambda).min(self.lambda_max)
    }
}

impl Default for AgeSchedule {
    fn default() -> Self {
        AgeSchedule {
            lambda0: 1.0,
            multiplier: 1.3,
            lambda_max: 5.0,
        }
    }
}

/// Steps of the weight solver per alternation when `w_steps` is left at 0.
pub const DEFAULT_W_STEPS_PER_SAMPLE: usize = 100;

/// Full configuration of a training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    /// Outer alternations `T`.
    pub outer_iters: usize,
    /// Epochs of model updates per alternation.
    pub theta_epochs: usize,
    /// Coordinate steps of the weight solver per alternation
    /// (0 = `DEFAULT_W_STEPS_PER_SAMPLE * N`).
    pub w_steps: usize,
    /// Classes per batch `P`.
    pub batch_classes: usize,
    /// Samples per class per batch `K`.
    pub batch_samples: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    pub ms: MsHyperParams,
    /// Balance regularization coefficient.
    pub mu: f64,
    pub age: AgeSchedule,
    /// Sampling plan of the weight solver. Requested sizes are clamped to
    /// each dataset's valid range at run time.
    pub w_plan: SamplingPlan,
    /// Harmonic-decay horizon of the solver stepsize, in coordinate steps
    /// on the run's global clock (0 = a quarter of the total step budget).
    pub w_horizon: f64,
    /// Stride of the weight-solver trace (0 disables intermediate rows).
    pub trace_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            outer_iters: 800,
            theta_epochs: 5,
            w_steps: 0,
            batch_classes: 4,
            batch_samples: 4,
            learning_rate: 5e-5,
            hidden_dim: 32,
            embed_dim: 8,
            activation: Activation::Tanh,
            ms: MsHyperParams::default(),
            mu: 5.0,
            age: AgeSchedule::default(),
            w_plan: SamplingPlan::Stochastic {
                classes: 4,
                weights: 4,
            },
            w_horizon: 0.0,
            trace_stride: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_classes < 2 || self.batch_samples < 2 {
            return Err(Error::config(format!(
                "a batch needs at least 2 classes and 2 samples per class, got P={} K={}",
                self.batch_classes, self.batch_samples
            )));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::config(format!("mu must be >= 0, got {}", self.mu)));
        }
        if !(self.w_horizon >= 0.0) {
            return Err(Error::config("solver horizon must be >= 0"));
        }
        self.ms.validate()?;
        self.age.validate()?;
        Ok(())
    }

    fn resolved_w_steps(&self, n: usize) -> usize {
        if self.w_steps > 0 {
            self.w_steps
        } else {
            DEFAULT_W_STEPS_PER_SAMPLE * n
        }
    }

    /// The solver stepsize decays harmonically across the whole run (the
    /// per-alternation schedules continue one global clock); the default
    /// horizon is a quarter of the total coordinate-step budget.
    fn resolved_horizon(&self, w_steps: usize) -> f64 {
        if self.w_horizon > 0.0 {
            self.w_horizon
        } else {
            (self.outer_iters as f64 * w_steps as f64 / 4.0).max(1.0)
        }
    }

    /// Clamps the requested solver sampling sizes to the dataset's valid
    /// range (at most `C-1` classes, at most `min N^c - 1` weights).
    fn resolved_plan(&self, index: &ClassIndex) -> SamplingPlan {
        let max_classes = index.n_classes().saturating_sub(1).max(1);
        let min_size = (0..index.n_classes())
            .map(|c| index.size(c))
            .min()
            .unwrap_or(2);
        let max_weights = min_size.saturating_sub(1).max(1);
        match self.w_plan {
            SamplingPlan::Stochastic { classes, weights } => SamplingPlan::Stochastic {
                classes: classes.clamp(1, max_classes),
                weights: weights.clamp(1, max_weights),
            },
            plan => plan,
        }
    }
}

/// Per-alternation convergence record.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub t: usize,
    pub lambda: f64,
    pub objective: f64,
    /// `|L^t - L^{t-1}|`; absent on the first alternation.
    pub delta_objective: Option<f64>,
    pub maw: f64,
    pub sdaw: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceTrace {
    /// CSV with header `t,lambda,objective,delta_objective,maw,sdaw`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,lambda,objective,delta_objective,maw,sdaw\n");
        for r in &self.rows {
            let delta = r.delta_objective.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{delta},{},{}",
                r.t, r.lambda, r.objective, r.maw, r.sdaw
            );
        }
        out
    }

    /// Largest `|delta objective|` over the final `n` alternations.
    pub fn tail_delta(&self, n: usize) -> Option<f64> {
        let deltas: Vec<f64> = self
            .rows
            .iter()
            .rev()
            .take(n)
            .filter_map(|r| r.delta_objective)
            .collect();
        if deltas.len() < n {
            return None;
        }
        deltas.iter().copied().reduce(f64::max)
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub weights: WeightState,
    pub trace: ConvergenceTrace,
    /// Weight-solver trace rows across all alternations, iteration numbers
    /// continuing globally.
    pub weight_trace: SolveTrace,
    /// Populated when a non-finite objective aborted the run early; the
    /// trace still covers the completed alternations.
    pub aborted: Option<String>,
}

/// One epoch's worth of batches: enough to visit roughly every sample once.
fn batches_per_epoch(n: usize, p: usize, k: usize) -> usize {
    n.div_ceil(p * k).max(1)
}

/// Mini-batch training of the weighted informative batch loss at fixed
/// sample weights. Classes smaller than `K` are skipped (with a warning);
/// it is an error if fewer than `P` classes remain.
pub fn train_theta<R: Rng>(
    model: &mut EmbeddingModel,
    ds: &Dataset,
    index: &ClassIndex,
    w: &[f64],
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<()> {
    let (p, k) = (cfg.batch_classes, cfg.batch_samples);
    let eligible: Vec<usize> = (0..index.n_classes())
        .filter(|&c| index.size(c) >= k)
        .collect();
    if eligible.len() < index.n_classes() {
        log::warn!(
            "skipping {} class(es) smaller than K={k} for batch construction",
            index.n_classes() - eligible.len()
        );
    }
    if eligible.len() < p {
        return Err(Error::contract(format!(
            "only {} class(es) have at least K={k} samples; P={p} are needed per batch",
            eligible.len()
        )));
    }

    let n = ds.len();
    let mut batch_features = Array2::<f64>::zeros((p * k, ds.dim()));
    for _ in 0..epochs {
        for _ in 0..batches_per_epoch(n, p, k) {
            let class_picks = sample_indices(rng, eligible.len(), p);
            let mut batch_ids = Vec::with_capacity(p * k);
            for ci in class_picks.iter() {
                let members = index.class(eligible[ci]);
                for mi in sample_indices(rng, members.len(), k).iter() {
                    batch_ids.push(members[mi]);
                }
            }
            for (row, &id) in batch_ids.iter().enumerate() {
                batch_features.row_mut(row).assign(&ds.feature(id));
            }
            let embeddings = model.forward_batch(batch_features.view())?;
            let batch_labels: Vec<usize> = batch_ids.iter().map(|&id| ds.label(id)).collect();
            let sim = msloss::similarity_matrix(embeddings.view());
            let mined = msloss::mine_pairs(sim.view(), &batch_labels, cfg.ms.eps);
            let (_, upstream) = msloss::weighted_batch_loss_grad(
                &batch_ids,
                w,
                &mined,
                embeddings.view(),
                &cfg.ms,
                p,
                k,
            )?;
            let grads = model.backward(batch_features.view(), upstream.view())?;
            model.sgd_step(&grads, cfg.learning_rate)?;
        }
    }
    Ok(())
}

fn initial_model(ds: &Dataset, cfg: &TrainConfig) -> Result<EmbeddingModel> {
    EmbeddingModel::new(
        &[ds.dim(), cfg.hidden_dim, cfg.embed_dim],
        cfg.activation,
        derive_seed(cfg.seed, 0),
    )
}

/// Balanced self-paced training: alternate model updates and weight solves,
/// growing the age parameter after each alternation.
pub fn bspml_train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let index = split_by_class(ds);
    if index.n_classes() < 2 {
        return Err(Error::config("training needs at least 2 classes"));
    }
    let n = ds.len();
    let w_steps = cfg.resolved_w_steps(n);
    let horizon = cfg.resolved_horizon(w_steps);
    let plan = cfg.resolved_plan(&index);

    let mut model = initial_model(ds, cfg)?;
    let mut rng_theta = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut rng_w = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));

    let mut state = WeightState::new(index.clone(), XiTable::zeros(n), cfg.age.lambda0, cfg.mu)?;
    let mut lambda = cfg.age.lambda0;
    let mut trace = ConvergenceTrace::default();
    let mut weight_trace = SolveTrace::default();
    let mut prev_objective: Option<f64> = None;
    let mut aborted = None;

    for t in 1..=cfg.outer_iters {
        train_theta(
            &mut model,
            ds,
            &index,
            state.weights(),
            cfg,
            cfg.theta_epochs,
            &mut rng_theta,
        )?;

        let embeddings = model.forward_batch(ds.features())?;
        state.set_xi(build_xi_table(embeddings.view(), ds.labels(), &cfg.ms))?;

        // shift the harmonic schedule so stepsizes keep decaying on one
        // global clock across alternations
        let step_offset = (t - 1) as f64 * w_steps as f64;
        let schedule = match StepSchedule::harmonic_for(state.xi(), &index, cfg.mu, horizon) {
            StepSchedule::HarmonicDecay { gamma0, horizon } => StepSchedule::HarmonicDecay {
                gamma0: gamma0 / (1.0 + step_offset / horizon),
                horizon: horizon + step_offset,
            },
            s => s,
        };
        let solve = solve_weights(
            &mut state,
            w_steps,
            &schedule,
            plan,
            &mut rng_w,
            cfg.trace_stride,
        )?;
        let offset = (t - 1) * w_steps;
        weight_trace
            .rows
            .extend(solve.rows.into_iter().map(|r| SolveTraceRow {
                iter: r.iter + offset,
                ..r
            }));
        weight_trace.final_objective = solve.final_objective;
        weight_trace.final_proj_grad_norm = solve.final_proj_grad_norm;

        lambda = cfg.age.advance(lambda);
        state.set_lambda(lambda)?;

        let obj = objective(&state);
        let stats = eval::weight_stats(&state);
        trace.rows.push(ConvergenceRow {
            t,
            lambda,
            objective: obj,
            delta_objective: prev_objective.map(|p| (obj - p).abs()),
            maw: stats.maw,
            sdaw: stats.sdaw,
        });
        if !obj.is_finite() {
            aborted = Some(format!("non-finite objective at alternation {t}"));
            break;
        }
        prev_objective = Some(obj);
    }

    Ok(TrainOutcome {
        model,
        weights: state,
        trace,
        weight_trace,
        aborted,
    })
}

/// The non-self-paced control: the identical pipeline with weights pinned
/// to one, no weight solve, and no age parameter.
pub fn ms_baseline_train(ds: &Dataset, cfg: &TrainConfig) -> Result<EmbeddingModel> {
    cfg.validate()?;
    let index = split_by_class(ds);
    if index.n_classes() < 2 {
        return Err(Error::config("training needs at least 2 classes"));
    }
    let mut model = initial_model(ds, cfg)?;
    let mut rng_theta = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let w = vec![1.0; ds.len()];
    for _ in 1..=cfg.outer_iters {
        train_theta(
            &mut model,
            ds,
            &index,
            &w,
            cfg,
            cfg.theta_epochs,
            &mut rng_theta,
        )?;
    }
    Ok(model)
}

/// Baseline training that also records a per-alternation trace: the
/// objective column holds the full-set multi-similarity loss; the age and
/// weight columns are constant (lambda 0, maw 1, sdaw 0).
pub fn ms_baseline_train_traced(
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(EmbeddingModel, ConvergenceTrace)> {
    cfg.validate()?;
    let index = split_by_class(ds);
    if index.n_classes() < 2 {
        return Err(Error::config("training needs at least 2 classes"));
    }
    let mut model = initial_model(ds, cfg)?;
    let mut rng_theta = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let w = vec![1.0; ds.len()];
    let mut trace = ConvergenceTrace::default();
    let mut prev = None;
    for t in 1..=cfg.outer_iters {
        train_theta(
            &mut model,
            ds,
            &index,
            &w,
            cfg,
            cfg.theta_epochs,
            &mut rng_theta,
        )?;
        let embeddings = model.forward_batch(ds.features())?;
        let obj = msloss::ms_loss(embeddings.view(), ds.labels(), &cfg.ms);
        trace.rows.push(ConvergenceRow {
            t,
            lambda: 0.0,
            objective: obj,
            delta_objective: prev.map(|p: f64| (obj - p).abs()),
            maw: 1.0,
            sdaw: 0.0,
        });
        prev = Some(obj);
    }
    Ok((model, trace))
}
