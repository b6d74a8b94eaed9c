//! Reverse-mode differentiation of one training iteration.
//!
//! A [`Tape`] is recorded per batch element during the rollout. Each step
//! holds the network activations, the QP problem and its solution, and the
//! inputs of the state/value update. [`backprop`] replays it backwards:
//! LSTM cells are differentiated by hand, QP nodes dispatch to
//! [`qp_backward`], and the state-dependent dynamics, barrier rows and
//! running cost are differentiated with forward-mode dual numbers.
//! Sampled noise is a constant of the tape.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Layout, NetworkParams, RecurrentState, StepCache};
use crate::qp::{qp_backward, QpProblem, QpSolution};
use crate::trainer::problem::LocalTerms;
use crate::trainer::ControlProblem;

/// Saved inputs of one timestep.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub x: Vec<f64>,
    pub net: StepCache,
    pub vx: Vec<f64>,
    pub qp: QpProblem,
    pub sol: QpSolution,
    pub dw: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Tape {
    pub steps: Vec<StepRecord>,
    pub x_terminal: Vec<f64>,
    pub terminal_net: StepCache,
    pub vx_terminal: Vec<f64>,
    pub v_terminal: f64,
}

impl Tape {
    /// Number of QP nodes whose active set is ambiguous (some constraint
    /// with both `λᵢ` and `sᵢ` below `threshold`).
    pub fn degenerate_qp_nodes(&self, threshold: f64) -> usize {
        self.steps
            .iter()
            .filter(|s| (0..s.sol.lambda.len()).any(|i| s.sol.lambda[i].abs() < threshold && s.sol.s[i] < threshold))
            .count()
    }
}

/// Gradient of the loss with respect to the tape's terminal outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSeed {
    pub dv: f64,
    pub dx: Vec<f64>,
    pub dvx: Vec<f64>,
}

/// One gradient buffer per trainable leaf, stored flat in the network layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layout: Layout,
    pub data: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(layout: &Layout) -> Self {
        Self { layout: layout.clone(), data: vec![0.0; layout.len()] }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.data[t.offset..t.offset + t.len])
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_assign(&mut self, other: &[f64]) {
        for (a, b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_finite(node: usize, what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { node, what: what.into() })
    }
}

/// Accumulates `∂loss/∂θ` for one tape into `grad`.
///
/// Node indices in diagnostics are timesteps; the terminal node is `N`.
pub fn backprop(
    tape: &Tape,
    problem: &ControlProblem,
    params: &NetworkParams,
    seed: &TerminalSeed,
    grad: &mut [f64],
) -> Result<()> {
    let sys = &problem.system;
    let (n_x, n_u, n_w) = (sys.n_x(), sys.n_u(), sys.n_w());
    let dt = problem.dt;
    let n = tape.steps.len();

    let hidden = params.hidden();
    let (dx_net, mut drec) =
        params.step_backward(&tape.terminal_net, &seed.dvx, &RecurrentState::zeros(hidden), grad);
    let mut dx: Vec<f64> = seed.dx.iter().zip(&dx_net).map(|(a, b)| a + b).collect();
    let dv = seed.dv;
    check_finite(n, "terminal adjoint", &dx)?;

    let r = problem.r_matrix();
    for t in (0..n).rev() {
        let st = &tape.steps[t];
        let local = problem.local_terms(&st.x);
        let mut adj = LocalTerms::zeros_like(&local);
        let u = &st.sol.u;
        let mut du = DVector::<f64>::zeros(n_u);
        let mut dvx = vec![0.0; n_x];

        // x' = x + (f + Gu)dt + Σdw
        for i in 0..n_x {
            let a = dx[i];
            adj.f[i] += dt * a;
            for j in 0..n_u {
                adj.g[i * n_u + j] += dt * a * u[j];
                du[j] += dt * local.g[i * n_u + j] * a;
            }
            for k in 0..n_w {
                adj.sigma[i * n_w + k] += a * st.dw[k];
            }
        }
        // V' = V − (q(x) + ½uᵀRu)dt + V_xᵀΣdw
        adj.running_cost -= dt * dv;
        du -= dt * dv * (r * u);
        for i in 0..n_x {
            let mut sdw = 0.0;
            for k in 0..n_w {
                sdw += local.sigma[i * n_w + k] * st.dw[k];
                adj.sigma[i * n_w + k] += dv * st.vx[i] * st.dw[k];
            }
            dvx[i] += dv * sdw;
        }
        // ū = QP(R, GᵀV_x, C(x), d(x))
        if du.iter().any(|v| *v != 0.0) {
            let back = qp_backward(&st.qp, &st.sol, &du, problem.qp.reg)?;
            for i in 0..n_x {
                for j in 0..n_u {
                    dvx[i] += local.g[i * n_u + j] * back.grad_q[j];
                    adj.g[i * n_u + j] += st.vx[i] * back.grad_q[j];
                }
            }
            for (k, (c_adj, d_adj)) in adj.rows.iter_mut().enumerate() {
                for j in 0..n_u {
                    c_adj[j] += back.grad_c[(k, j)];
                }
                *d_adj += back.grad_d[k];
            }
        }
        let dx_local = problem.local_vjp(&st.x, &adj);
        let (dx_net, drec_prev) = params.step_backward(&st.net, &dvx, &drec, grad);
        dx = dx.iter().zip(&dx_local).zip(&dx_net).map(|((a, b), c)| a + b + c).collect();
        drec = drec_prev;
        check_finite(t, "state adjoint", &dx)?;
    }
    grad[params.psi_index()] += dv;
    params.accumulate_initial_state_grad(&drec, grad);
    check_finite(0, "parameter gradient", grad)?;
    Ok(())
}

/// Per-tensor comparison of analytic and central-difference gradients.
#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub epsilon: f64,
    pub abs_floor: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_tensor: String,
    pub per_tensor: Vec<(String, f64)>,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// The step for entry `i` is `epsilon·max(1, |θᵢ|)`. `loss` must use the same
/// noise on every call. When `indices` is `Some`, only those entries are
/// perturbed.
pub fn finite_difference_check<F>(
    loss: F,
    params: &NetworkParams,
    analytic: &[f64],
    epsilon: f64,
    abs_floor: f64,
    indices: Option<&[usize]>,
) -> FdReport
where
    F: Fn(&NetworkParams) -> f64 + Sync,
{
    use rayon::prelude::*;
    let all: Vec<usize> = match indices {
        Some(ix) => ix.to_vec(),
        None => (0..params.data.len()).collect(),
    };
    let errs: Vec<(usize, f64)> = all
        .par_iter()
        .map(|&i| {
            let h = epsilon * params.data[i].abs().max(1.0);
            let mut p = params.clone();
            p.data[i] += h;
            let fp = loss(&p);
            p.data[i] -= 2.0 * h;
            let fm = loss(&p);
            let numeric = (fp - fm) / (2.0 * h);
            (i, relative_error(analytic[i], numeric, abs_floor))
        })
        .collect();
    let layout = params.layout();
    let name_of = |i: usize| {
        layout
            .tensors
            .iter()
            .find(|t| (t.offset..t.offset + t.len).contains(&i))
            .map(|t| t.name.clone())
            .unwrap_or_default()
    };
    let mut per_tensor: Vec<(String, f64)> = Vec::new();
    for t in &layout.tensors {
        let m = errs
            .iter()
            .filter(|(i, _)| (t.offset..t.offset + t.len).contains(i))
            .map(|(_, e)| *e)
            .fold(f64::NAN, f64::max);
        if !m.is_nan() {
            per_tensor.push((t.name.clone(), m));
        }
    }
    let (worst_index, max_rel_err) =
        errs.iter().copied().fold((0, 0.0), |(bi, be), (i, e)| if e > be || e.is_nan() { (i, e) } else { (bi, be) });
    FdReport {
        epsilon,
        abs_floor,
        checked: errs.len(),
        max_rel_err,
        worst_index,
        worst_tensor: name_of(worst_index),
        per_tensor,
    }
}
