//! Safe FBSDE training loop: batched rollouts through the QP safety layer,
//! terminal-target loss, full BPTT and Adam.

pub mod adam;
pub mod cost;
pub mod loss;
pub mod problem;
pub mod rollout;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use cost::CostSpec;
pub use loss::{compute_loss, terminal_seed, LossBreakdown, LossWeights};
pub use problem::ControlProblem;
pub use rollout::{rollout_batch, rollout_element, stream_id, RolloutRecord, Trajectory};

use crate::diff_engine::{backprop, GradientSet};
use crate::dynamics::NoiseStream;
use crate::error::{Error, Result};
use crate::network::{init_params_with_hidden, NetworkParams, DEFAULT_HIDDEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_hidden")]
    pub hidden_units: usize,
}

fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            iterations: 201,
            horizon_steps: 75,
            dt: 0.02,
            loss_weights: LossWeights::default(),
            weight_decay: 1e-5,
            learning_rate: 1e-2,
            seed: 0,
            adam: AdamConfig::default(),
            hidden_units: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.horizon_steps == 0 {
            return Err(Error::Config("batch_size, iterations and horizon_steps must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        let w = &self.loss_weights;
        if [w.a, w.b, w.c, w.d, self.weight_decay].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights and weight decay must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.hidden_units == 0 {
            return Err(Error::Config("hidden_units must be >= 1".into()));
        }
        Ok(())
    }
}

/// Summary of QP solves over one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpStats {
    pub solves: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
    pub max_residual: f64,
}

impl QpStats {
    pub fn from_record(record: &RolloutRecord) -> Self {
        let mut solves = 0;
        let mut total = 0;
        let mut max_iterations = 0;
        let mut max_residual: f64 = 0.0;
        for t in &record.trajectories {
            solves += t.qp_iterations.len();
            total += t.qp_iterations.iter().sum::<usize>();
            max_iterations = max_iterations.max(t.qp_iterations.iter().copied().max().unwrap_or(0));
            max_residual = t.qp_residuals.iter().copied().fold(max_residual, f64::max);
        }
        Self {
            solves,
            mean_iterations: if solves == 0 { 0.0 } else { total as f64 / solves as f64 },
            max_iterations,
            max_residual,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub loss: LossBreakdown,
    /// Minimum over the batch of `min_t h_b`, per barrier.
    pub min_h: Vec<f64>,
    pub qp: QpStats,
    pub grad_norm: f64,
    pub psi: f64,
}

/// Closest approach to one barrier's boundary seen during training.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCase {
    pub barrier: usize,
    pub iteration: usize,
    pub element: usize,
    pub min_h: f64,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub log: Vec<IterationLog>,
    pub worst_cases: Vec<WorstCase>,
}

/// Loss, rollouts and parameter gradient of one iteration.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub record: RolloutRecord,
    pub loss: LossBreakdown,
    pub grad: GradientSet,
}

/// Rolls out one batch on tape and backpropagates the full loss. Per-element
/// gradients are computed in parallel and summed in element order.
pub fn batch_gradient(
    params: &NetworkParams,
    problem: &ControlProblem,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<BatchGradient> {
    let (record, tapes) = rollout_batch(params, problem, cfg.batch_size, cfg.seed, iteration, false, true)?;
    let loss = compute_loss(&record, &problem.cost, &cfg.loss_weights, cfg.weight_decay, params);
    let scale = 1.0 / cfg.batch_size as f64;
    let parts: Vec<Result<Vec<f64>>> = record
        .trajectories
        .par_iter()
        .zip(tapes.par_iter())
        .map(|(traj, tape)| {
            let seed = terminal_seed(traj, &problem.cost, &cfg.loss_weights, scale);
            let mut g = vec![0.0; params.layout().len()];
            backprop(tape, problem, params, &seed, &mut g)?;
            Ok(g)
        })
        .collect();
    let mut grad = GradientSet::zeros(params.layout());
    for p in parts {
        grad.add_assign(&p?);
    }
    if cfg.weight_decay > 0.0 {
        for (i, decayed) in params.layout().decay_mask().into_iter().enumerate() {
            if decayed {
                grad.data[i] += 2.0 * cfg.weight_decay * params.data[i];
            }
        }
    }
    Ok(BatchGradient { record, loss, grad })
}

/// Fresh parameters for `problem` drawn from the seed's dedicated init stream.
pub fn initial_params(problem: &ControlProblem, cfg: &TrainConfig) -> Result<NetworkParams> {
    let mut stream = NoiseStream::new(cfg.seed, u64::MAX);
    init_params_with_hidden(&mut stream, problem.system.n_x(), cfg.hidden_units)
}

/// Trains from freshly initialized parameters.
pub fn train(
    problem: &ControlProblem,
    cfg: &TrainConfig,
    observer: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    let params = initial_params(problem, cfg)?;
    train_from(params, problem, cfg, observer)
}

/// Runs `cfg.iterations` rollout/backprop/Adam iterations from `params`.
/// Any state with `h < 0` aborts the run with `SafetyViolation`.
pub fn train_from(
    mut params: NetworkParams,
    problem: &ControlProblem,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&IterationLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.horizon_steps != problem.horizon_steps || cfg.dt != problem.dt {
        return Err(Error::Config(format!(
            "train config (N={}, dt={}) disagrees with problem (N={}, dt={})",
            cfg.horizon_steps, cfg.dt, problem.horizon_steps, problem.dt
        )));
    }
    if params.n_x() != problem.system.n_x() {
        return Err(Error::ShapeMismatch(format!(
            "network n_x = {}, system n_x = {}",
            params.n_x(),
            problem.system.n_x()
        )));
    }
    let nb = problem.barriers().len();
    let mut adam = AdamState::new(params.layout().len());
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut worst: Vec<Option<WorstCase>> = vec![None; nb];

    for k in 0..cfg.iterations {
        let step = batch_gradient(&params, problem, cfg, k)?;
        for (e, t) in step.record.trajectories.iter().enumerate() {
            for (b, w) in worst.iter_mut().enumerate() {
                let h = t.min_barrier(b);
                if w.as_ref().is_none_or(|w| h < w.min_h) {
                    *w = Some(WorstCase { barrier: b, iteration: k, element: e, min_h: h, trajectory: t.clone() });
                }
            }
        }
        let entry = IterationLog {
            iteration: k,
            loss: step.loss,
            min_h: step.record.min_barrier(nb),
            qp: QpStats::from_record(&step.record),
            grad_norm: step.grad.norm(),
            psi: params.psi(),
        };
        observer(&entry);
        log.push(entry);
        for (e, t) in step.record.trajectories.iter().enumerate() {
            if let Some((s, b, h)) = t.first_violation() {
                return Err(Error::SafetyViolation { iteration: k, element: e, step: s, barrier: b, value: h });
            }
        }
        adam_step(&mut params.data, &step.grad.data, &mut adam, cfg.learning_rate, &cfg.adam)?;
    }
    Ok(TrainOutcome { params, log, worst_cases: worst.into_iter().flatten().collect() })
}

/// Test statistics over fresh-noise rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub num_rollouts: usize,
    /// Per-coordinate mean of the (angle-wrapped) terminal error `x_N − x_goal`.
    pub terminal_error_mean: Vec<f64>,
    pub terminal_error_std: Vec<f64>,
    /// Mean of `|x_N − x_goal|` per coordinate.
    pub terminal_abs_error_mean: Vec<f64>,
    pub min_h: Vec<f64>,
    pub violations: usize,
    pub mean_cost: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub stats: EvalStats,
    /// `[step][coordinate]` mean and std of the states.
    pub mean_states: Vec<Vec<f64>>,
    pub std_states: Vec<Vec<f64>>,
    pub record: RolloutRecord,
}

fn mean_std(rows: impl Iterator<Item = Vec<f64>> + Clone, n: usize) -> (Vec<f64>, Vec<f64>) {
    let count = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; n];
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / count;
        }
    }
    let mut var = vec![0.0; n];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / count;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Rolls out the safe controller on `num_rollouts` evaluation noise streams.
pub fn evaluate(params: &NetworkParams, problem: &ControlProblem, num_rollouts: usize, seed: u64) -> Result<Evaluation> {
    if params.n_x() != problem.system.n_x() {
        return Err(Error::ShapeMismatch(format!(
            "network n_x = {}, system n_x = {}",
            params.n_x(),
            problem.system.n_x()
        )));
    }
    let (record, _) = rollout_batch(params, problem, num_rollouts, seed, 0, true, false)?;
    let n_x = problem.system.n_x();
    let errs = record.trajectories.iter().map(|t| problem.cost.error(t.terminal_state()));
    let (terminal_error_mean, terminal_error_std) = mean_std(errs.clone(), n_x);
    let (terminal_abs_error_mean, _) = mean_std(errs.map(|e| e.into_iter().map(f64::abs).collect()), n_x);
    let steps = problem.horizon_steps + 1;
    let (mut mean_states, mut std_states) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for s in 0..steps {
        let (m, sd) = mean_std(record.trajectories.iter().map(|t| t.states[s].clone()), n_x);
        mean_states.push(m);
        std_states.push(sd);
    }
    let m = record.batch_size().max(1) as f64;
    let mean_cost = record
        .trajectories
        .iter()
        .map(|t| {
            let run: f64 = t
                .states
                .iter()
                .zip(&t.controls)
                .map(|(x, u)| (problem.cost.running(x.as_slice()) + problem.cost.control_cost(u)) * problem.dt)
                .sum();
            run + problem.cost.terminal(t.terminal_state())
        })
        .sum::<f64>()
        / m;
    let stats = EvalStats {
        num_rollouts,
        terminal_error_mean,
        terminal_error_std,
        terminal_abs_error_mean,
        min_h: record.min_barrier(problem.barriers().len()),
        violations: record.trajectories.iter().filter(|t| t.first_violation().is_some()).count(),
        mean_cost,
    };
    Ok(Evaluation { stats, mean_states, std_states, record })
}

/// Result of comparing the full-loss gradient with central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub report: crate::diff_engine::FdReport,
    /// QP nodes with an ambiguous active set (both `λᵢ` and `sᵢ` < 1e-6).
    pub degenerate_qp_nodes: usize,
    /// QP nodes with at least one active constraint.
    pub active_qp_nodes: usize,
    pub loss: f64,
}

/// Training loss at `params` under `iteration`'s noise, without a tape.
pub fn batch_loss(params: &NetworkParams, problem: &ControlProblem, cfg: &TrainConfig, iteration: usize) -> Result<f64> {
    let (record, _) = rollout_batch(params, problem, cfg.batch_size, cfg.seed, iteration, false, false)?;
    Ok(compute_loss(&record, &problem.cost, &cfg.loss_weights, cfg.weight_decay, params).total)
}

/// Checks every parameter's analytic gradient of the training loss against
/// central differences under common random numbers.
pub fn gradient_check(
    params: &NetworkParams,
    problem: &ControlProblem,
    cfg: &TrainConfig,
    epsilon: f64,
    abs_floor: f64,
) -> Result<GradCheck> {
    let bg = batch_gradient(params, problem, cfg, 0)?;
    let (_, tapes) = rollout_batch(params, problem, cfg.batch_size, cfg.seed, 0, false, true)?;
    let degenerate_qp_nodes = tapes.iter().map(|t| t.degenerate_qp_nodes(1e-6)).sum();
    let active_qp_nodes = tapes
        .iter()
        .flat_map(|t| &t.steps)
        .filter(|s| s.sol.lambda.iter().any(|l| *l > 1e-8))
        .count();
    let report = crate::diff_engine::finite_difference_check(
        |p| batch_loss(p, problem, cfg, 0).unwrap_or(f64::NAN),
        params,
        &bg.grad.data,
        epsilon,
        abs_floor,
        None,
    );
    Ok(GradCheck { report, degenerate_qp_nodes, active_qp_nodes, loss: bg.loss.total })
}
