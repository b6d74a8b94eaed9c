use nalgebra::DVector;
use rayon::prelude::*;

use crate::diff_engine::{StepRecord, Tape};
use crate::dynamics::{mat_t_vec, mat_vec, NoiseStream};
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::qp::{assemble_hamiltonian_qp, solve_qp_pdipm};

use super::problem::ControlProblem;

/// One simulated trajectory of the safe controller.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `N + 1` states.
    pub states: Vec<Vec<f64>>,
    /// `N` QP-filtered controls.
    pub controls: Vec<Vec<f64>>,
    /// `N + 1` forward-propagated values, `values[0] = ψ`.
    pub values: Vec<f64>,
    /// `N + 1` predicted value gradients; the last one is evaluated at the
    /// terminal state.
    pub value_grads: Vec<Vec<f64>>,
    /// `N` Brownian increments, shared by the state and value updates.
    pub noises: Vec<Vec<f64>>,
    /// Barrier values at each of the `N + 1` states, `[step][barrier]`.
    pub barrier_values: Vec<Vec<f64>>,
    pub qp_iterations: Vec<usize>,
    pub qp_residuals: Vec<f64>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn terminal_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    /// `min_t h_b(x_t)` for barrier `b`.
    pub fn min_barrier(&self, b: usize) -> f64 {
        self.barrier_values.iter().map(|h| h[b]).fold(f64::INFINITY, f64::min)
    }

    /// First `(step, barrier, h)` with `h < 0`, if any.
    pub fn first_violation(&self) -> Option<(usize, usize, f64)> {
        self.barrier_values
            .iter()
            .enumerate()
            .find_map(|(t, hs)| hs.iter().position(|h| *h < 0.0).map(|b| (t, b, hs[b])))
    }
}

/// All batch elements of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub trajectories: Vec<Trajectory>,
}

impl RolloutRecord {
    pub fn batch_size(&self) -> usize {
        self.trajectories.len()
    }

    /// Per-barrier minimum over every state of every trajectory.
    pub fn min_barrier(&self, num_barriers: usize) -> Vec<f64> {
        (0..num_barriers)
            .map(|b| self.trajectories.iter().map(|t| t.min_barrier(b)).fold(f64::INFINITY, f64::min))
            .collect()
    }
}

/// Noise stream id for `(iteration, element)`; evaluation streams use the
/// top bit so they never collide with training streams.
pub fn stream_id(iteration: usize, element: usize, evaluation: bool) -> u64 {
    let base = ((iteration as u64) << 32) | element as u64;
    if evaluation { base | (1 << 63) } else { base }
}

/// Simulates one batch element with the network-predicted value gradient
/// and the QP safety layer, optionally recording a tape for backprop.
pub fn rollout_element(
    params: &NetworkParams,
    problem: &ControlProblem,
    stream: &mut NoiseStream,
    record_tape: bool,
    (iteration, element): (usize, usize),
) -> Result<(Trajectory, Option<Tape>)> {
    let sys = &problem.system;
    let (n_x, n_u, n_w) = (sys.n_x(), sys.n_u(), sys.n_w());
    let (n, dt) = (problem.horizon_steps, problem.dt);
    if params.n_x() != n_x {
        return Err(Error::ShapeMismatch(format!("network expects n_x = {}, system has {n_x}", params.n_x())));
    }

    let mut traj = Trajectory {
        states: Vec::with_capacity(n + 1),
        controls: Vec::with_capacity(n),
        values: Vec::with_capacity(n + 1),
        value_grads: Vec::with_capacity(n + 1),
        noises: Vec::with_capacity(n),
        barrier_values: Vec::with_capacity(n + 1),
        qp_iterations: Vec::with_capacity(n),
        qp_residuals: Vec::with_capacity(n),
    };
    let mut steps = Vec::with_capacity(if record_tape { n } else { 0 });

    let mut x = problem.x0.clone();
    let mut v = params.psi();
    let mut rec = params.initial_state();
    for t in 0..n {
        let (vx, next_rec, cache) = params.step(&x, &rec);
        let local = problem.local_terms(&x);
        let rows = problem.constraint_rows_from(&local);
        let qp = assemble_hamiltonian_qp(problem.r_matrix(), &local.g, &vx, &rows)?;
        let sol = solve_qp_pdipm(&qp, &problem.qp).map_err(|e| Error::RolloutInfeasible {
            iteration,
            element,
            step: t,
            state: x.clone(),
            source: Box::new(e),
        })?;
        let u: Vec<f64> = sol.u.iter().copied().collect();
        let dw = stream.sample(n_w, dt);

        let sdw = mat_vec(&local.sigma, n_x, n_w, &dw);
        let gu = mat_vec(&local.g, n_x, n_u, &u);
        let running = local.running_cost + problem.cost.control_cost(&u);
        let v_next = v - running * dt + vx.iter().zip(&sdw).map(|(a, b)| a * b).sum::<f64>();
        let x_next: Vec<f64> = (0..n_x).map(|i| x[i] + (local.f[i] + gu[i]) * dt + sdw[i]).collect();

        traj.states.push(x.clone());
        traj.values.push(v);
        traj.value_grads.push(vx.clone());
        traj.barrier_values.push(problem.barrier_values(&x));
        traj.controls.push(u);
        traj.noises.push(dw.clone());
        traj.qp_iterations.push(sol.iterations);
        traj.qp_residuals.push(sol.residual);
        if record_tape {
            steps.push(StepRecord { x: x.clone(), net: cache, vx, qp, sol, dw });
        }
        x = x_next;
        v = v_next;
        rec = next_rec;
    }
    let (vx_n, _, terminal_cache) = params.step(&x, &rec);
    traj.barrier_values.push(problem.barrier_values(&x));
    traj.states.push(x.clone());
    traj.values.push(v);
    traj.value_grads.push(vx_n.clone());

    let tape = record_tape.then(|| Tape {
        steps,
        x_terminal: x,
        terminal_net: terminal_cache,
        vx_terminal: vx_n,
        v_terminal: v,
    });
    Ok((traj, tape))
}

/// Rolls out `batch_size` elements in parallel; element `i` uses noise
/// stream `stream_id(iteration, i, evaluation)`.
pub fn rollout_batch(
    params: &NetworkParams,
    problem: &ControlProblem,
    batch_size: usize,
    seed: u64,
    iteration: usize,
    evaluation: bool,
    record_tape: bool,
) -> Result<(RolloutRecord, Vec<Tape>)> {
    problem.check_start()?;
    let results: Vec<Result<(Trajectory, Option<Tape>)>> = (0..batch_size)
        .into_par_iter()
        .map(|i| {
            let mut stream = crate::dynamics::NoiseStream::new(seed, stream_id(iteration, i, evaluation));
            rollout_element(params, problem, &mut stream, record_tape, (iteration, i))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(batch_size);
    let mut tapes = Vec::new();
    for r in results {
        let (t, tape) = r?;
        trajectories.push(t);
        tapes.extend(tape);
    }
    Ok((RolloutRecord { trajectories }, tapes))
}

impl ControlProblem {
    pub(crate) fn constraint_rows_from(
        &self,
        local: &super::problem::LocalTerms<f64>,
    ) -> Vec<crate::barrier::ConstraintRow> {
        local
            .rows
            .iter()
            .map(|(c, d)| crate::barrier::ConstraintRow { c_row: c.clone(), d: *d })
            .collect()
    }

    /// Unconstrained Hamiltonian minimizer `−R⁻¹GᵀV_x`.
    pub fn unfiltered_control(&self, g: &[f64], vx: &[f64]) -> Vec<f64> {
        let n_u = self.system.n_u();
        let gtv = mat_t_vec(g, self.system.n_x(), n_u, vx);
        let r = self.r_matrix();
        let chol = r.clone().cholesky().expect("R validated as SPD");
        let u = chol.solve(&DVector::from_vec(gtv));
        u.iter().map(|v| -v).collect()
    }
}
