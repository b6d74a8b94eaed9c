//! Monte Carlo check of the safety guarantee and worst-case extraction.
//!
//! The verifier checks the theorem's conclusion on sampled paths only. Zero
//! violations at step resolution do not certify the continuous-time paths
//! between samples; every report carries that caveat.

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{mat_vec, NoiseStream};
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::qp::{assemble_hamiltonian_qp, solve_qp_pdipm};
use crate::trainer::{ControlProblem, Trajectory};

pub const DISCRETIZATION_CAVEAT: &str = "barrier values are checked at the sampled time steps only; \
zero violations at step resolution do not certify the continuous-time paths between samples";

/// Where the value gradient fed to the Hamiltonian comes from.
#[derive(Debug, Clone, Copy)]
pub enum NominalGradient<'a> {
    /// `V_x = 0`: the minimum-effort control that satisfies the barriers.
    Zero,
    /// Fresh `N(0, scale²)` entries at every step.
    Random { scale: f64 },
    /// A trained network.
    Network(&'a NetworkParams),
}

#[derive(Debug, Clone, Copy)]
pub struct Controller<'a> {
    pub nominal: NominalGradient<'a>,
    /// With the QP filter the control is the constrained Hamiltonian
    /// minimizer; without it, `−R⁻¹GᵀV_x`.
    pub filtered: bool,
}

impl<'a> Controller<'a> {
    pub fn filtered(nominal: NominalGradient<'a>) -> Self {
        Self { nominal, filtered: true }
    }

    pub fn unfiltered(nominal: NominalGradient<'a>) -> Self {
        Self { nominal, filtered: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SafetyReport {
    pub num_rollouts: usize,
    pub epsilon: f64,
    pub horizon_steps: usize,
    pub horizon_time: f64,
    /// Rollouts whose running minimum of some `h` reached `−ε` or below.
    pub violation_count: usize,
    /// `violation_count / num_rollouts`; `None` when no rollouts were run.
    pub empirical_probability: Option<f64>,
    /// Rollouts aborted by an infeasible QP.
    pub infeasible_count: usize,
    pub theorem_bound: String,
    pub min_h_overall: Option<f64>,
    pub min_h_per_barrier: Vec<Option<f64>>,
    pub worst_trajectory_index: Option<usize>,
    pub worst_barrier: Option<usize>,
    pub caveat: String,
}

/// Sampled path of one verification rollout.
#[derive(Debug, Clone)]
pub struct VerifyRollout {
    pub trajectory: Trajectory,
    /// Step at which the QP became infeasible, if it did.
    pub infeasible_at: Option<usize>,
}

const VERIFY_STREAM: u64 = 1 << 62;
const NOMINAL_STREAM: u64 = 1 << 61;

/// Simulates one rollout of `controller` on noise stream `index`.
pub fn simulate(controller: &Controller<'_>, problem: &ControlProblem, seed: u64, index: usize) -> Result<VerifyRollout> {
    let sys = &problem.system;
    let (n_x, n_u, n_w) = (sys.n_x(), sys.n_u(), sys.n_w());
    let n = problem.horizon_steps;
    let mut noise = NoiseStream::new(seed, VERIFY_STREAM | index as u64);
    let mut nominal_noise = NoiseStream::new(seed, NOMINAL_STREAM | index as u64);
    if let NominalGradient::Network(p) = controller.nominal {
        if p.n_x() != n_x {
            return Err(Error::ShapeMismatch(format!("network n_x = {}, system n_x = {n_x}", p.n_x())));
        }
    }
    let mut rec = match controller.nominal {
        NominalGradient::Network(p) => Some(p.initial_state()),
        _ => None,
    };
    let mut t = Trajectory {
        states: vec![],
        controls: vec![],
        values: vec![],
        value_grads: vec![],
        noises: vec![],
        barrier_values: vec![],
        qp_iterations: vec![],
        qp_residuals: vec![],
    };
    let mut x = problem.x0.clone();
    let mut infeasible_at = None;
    for step in 0..n {
        let vx = match controller.nominal {
            NominalGradient::Zero => vec![0.0; n_x],
            NominalGradient::Random { scale } => (0..n_x).map(|_| scale * nominal_noise.standard_normal()).collect(),
            NominalGradient::Network(p) => {
                let (vx, next) = p.predict_vx(&x, rec.as_ref().expect("network state"));
                rec = Some(next);
                vx
            }
        };
        let local = problem.local_terms(&x);
        let u = if controller.filtered {
            let rows = problem.constraint_rows_from(&local);
            let qp = assemble_hamiltonian_qp(problem.r_matrix(), &local.g, &vx, &rows)?;
            match solve_qp_pdipm(&qp, &problem.qp) {
                Ok(sol) => {
                    t.qp_iterations.push(sol.iterations);
                    t.qp_residuals.push(sol.residual);
                    sol.u.iter().copied().collect()
                }
                Err(Error::InfeasibleProblem { .. }) => {
                    infeasible_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            }
        } else {
            problem.unfiltered_control(&local.g, &vx)
        };
        let dw = noise.sample(n_w, problem.dt);
        let sdw = mat_vec(&local.sigma, n_x, n_w, &dw);
        let gu = mat_vec(&local.g, n_x, n_u, &u);
        let next: Vec<f64> = (0..n_x).map(|i| x[i] + (local.f[i] + gu[i]) * problem.dt + sdw[i]).collect();
        t.barrier_values.push(problem.barrier_values(&x));
        t.states.push(std::mem::replace(&mut x, next));
        t.value_grads.push(vx);
        t.controls.push(u);
        t.noises.push(dw);
    }
    t.barrier_values.push(problem.barrier_values(&x));
    t.states.push(x);
    Ok(VerifyRollout { trajectory: t, infeasible_at })
}

/// Runs `num_rollouts` independent rollouts and counts those whose running
/// minimum of any barrier drops to `−epsilon` or below.
pub fn monte_carlo_safety(
    controller: &Controller<'_>,
    problem: &ControlProblem,
    num_rollouts: usize,
    epsilon: f64,
    seed: u64,
) -> Result<SafetyReport> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    problem.check_start()?;
    let nb = problem.barriers().len();
    let summaries: Vec<Result<(Vec<f64>, bool)>> = (0..num_rollouts)
        .into_par_iter()
        .map(|i| {
            let r = simulate(controller, problem, seed, i)?;
            let mins = (0..nb).map(|b| r.trajectory.min_barrier(b)).collect();
            Ok((mins, r.infeasible_at.is_some()))
        })
        .collect();
    let mut violation_count = 0;
    let mut infeasible_count = 0;
    let mut min_h_per_barrier: Vec<Option<f64>> = vec![None; nb];
    let mut worst: Option<(f64, usize, usize)> = None;
    for (i, s) in summaries.into_iter().enumerate() {
        let (mins, infeasible) = s?;
        infeasible_count += infeasible as usize;
        if mins.iter().any(|h| *h <= -epsilon) {
            violation_count += 1;
        }
        for (b, &h) in mins.iter().enumerate() {
            if min_h_per_barrier[b].is_none_or(|m| h < m) {
                min_h_per_barrier[b] = Some(h);
            }
            if worst.is_none_or(|(w, _, _)| h < w) {
                worst = Some((h, i, b));
            }
        }
    }
    Ok(SafetyReport {
        num_rollouts,
        epsilon,
        horizon_steps: problem.horizon_steps,
        horizon_time: problem.horizon_steps as f64 * problem.dt,
        violation_count,
        empirical_probability: (num_rollouts > 0).then(|| violation_count as f64 / num_rollouts as f64),
        infeasible_count,
        theorem_bound: if controller.filtered {
            "QP-filtered control keeps h >= 0 with probability 1 in continuous time; expected violation count 0".into()
        } else {
            "no guarantee: the barrier filter is disabled".into()
        },
        min_h_overall: worst.map(|w| w.0),
        min_h_per_barrier,
        worst_trajectory_index: worst.map(|w| w.1),
        worst_barrier: worst.map(|w| w.2),
        caveat: DISCRETIZATION_CAVEAT.into(),
    })
}

/// Trajectory with the smallest `min_t h_barrier(x_t)`, its index and that
/// minimum. `None` for an empty set.
pub fn worst_case_extract(trajectories: &[Trajectory], barrier: usize) -> Option<(usize, &Trajectory, f64)> {
    trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t, t.min_barrier(barrier)))
        .fold(None, |best, cand| match best {
            Some(b) if b.2 <= cand.2 => Some(b),
            _ => Some(cand),
        })
}

/// [`worst_case_extract`] for every barrier.
pub fn worst_cases_per_barrier(trajectories: &[Trajectory], num_barriers: usize) -> Vec<Option<(usize, f64)>> {
    (0..num_barriers)
        .map(|b| worst_case_extract(trajectories, b).map(|(i, _, h)| (i, h)))
        .collect()
}
