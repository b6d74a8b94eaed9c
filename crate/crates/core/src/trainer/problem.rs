use nalgebra::DMatrix;

use crate::barrier::{constraint_terms, BarrierSpec, ConstraintRow};
use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::qp::QpSettings;
use crate::scalar::{Dual, Scalar};

use super::cost::CostSpec;

/// Everything that defines one safe control task, independent of the
/// learner: dynamics, barriers, costs, initial state and discretization.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub system: SystemModel,
    barriers: Vec<BarrierSpec>,
    /// `½ tr(∂²h/∂x² ΣΣᵀ)` per barrier; both factors are state-independent.
    traces: Vec<f64>,
    pub cost: CostSpec,
    pub x0: Vec<f64>,
    pub dt: f64,
    pub horizon_steps: usize,
    pub qp: QpSettings,
    r: DMatrix<f64>,
}

/// State-dependent quantities of one timestep, generic so that the same
/// code yields values (`f64`) and directional derivatives (`Dual`).
#[derive(Debug, Clone)]
pub(crate) struct LocalTerms<S> {
    pub f: Vec<S>,
    /// Row-major `n_x × n_u`.
    pub g: Vec<S>,
    /// Row-major `n_x × n_w`.
    pub sigma: Vec<S>,
    pub running_cost: S,
    /// `(c_row, d)` per barrier.
    pub rows: Vec<(Vec<S>, S)>,
}

impl LocalTerms<f64> {
    pub(crate) fn zeros_like(other: &LocalTerms<f64>) -> Self {
        LocalTerms {
            f: vec![0.0; other.f.len()],
            g: vec![0.0; other.g.len()],
            sigma: vec![0.0; other.sigma.len()],
            running_cost: 0.0,
            rows: other.rows.iter().map(|(c, _)| (vec![0.0; c.len()], 0.0)).collect(),
        }
    }
}

impl ControlProblem {
    pub fn new(
        system: SystemModel,
        barriers: Vec<BarrierSpec>,
        cost: CostSpec,
        x0: Vec<f64>,
        dt: f64,
        horizon_steps: usize,
        qp: QpSettings,
    ) -> Result<Self> {
        system.check_state(&x0)?;
        cost.validate(system.n_x(), system.n_u())?;
        for b in &barriers {
            b.validate_for(&system)?;
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if horizon_steps == 0 {
            return Err(Error::InvalidParameter("horizon must have at least one step".into()));
        }
        let r = cost.r_matrix();
        crate::qp::check_spd(&r)?;
        let traces = barriers.iter().map(|b| b.trace_term(&system, &x0)).collect();
        Ok(Self { system, barriers, traces, cost, x0, dt, horizon_steps, qp, r })
    }

    pub fn barriers(&self) -> &[BarrierSpec] {
        &self.barriers
    }

    pub fn r_matrix(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn barrier_values(&self, x: &[f64]) -> Vec<f64> {
        self.barriers.iter().map(|b| b.eval(x)).collect()
    }

    /// Fails with `UnsafeStart` unless `h(x0) > 0` for every barrier.
    pub fn check_start(&self) -> Result<()> {
        for (k, h) in self.barrier_values(&self.x0).into_iter().enumerate() {
            if !(h > 0.0) {
                return Err(Error::UnsafeStart { barrier: k, value: h });
            }
        }
        Ok(())
    }

    pub fn constraint_rows(&self, x: &[f64]) -> Vec<ConstraintRow> {
        let t = self.local_terms(x);
        t.rows.into_iter().map(|(c_row, d)| ConstraintRow { c_row, d }).collect()
    }

    pub(crate) fn local_terms<S: Scalar>(&self, x: &[S]) -> LocalTerms<S> {
        let f = self.system.drift(x);
        let g = self.system.actuation(x);
        let sigma = self.system.diffusion(x);
        let rows = self
            .barriers
            .iter()
            .zip(&self.traces)
            .map(|(b, &trace)| constraint_terms(b, &self.system, x, &f, &g, trace))
            .collect();
        let running_cost = self.cost.running(x);
        LocalTerms { f, g, sigma, running_cost, rows }
    }

    /// `(∂T/∂x)ᵀ adj` where `T` is the collection of local terms, computed by
    /// one forward-mode sweep per state coordinate.
    pub(crate) fn local_vjp(&self, x: &[f64], adj: &LocalTerms<f64>) -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let t = self.local_terms(&Dual::seed(x, j));
                let dot = |a: &[f64], b: &[Dual]| a.iter().zip(b).map(|(p, q)| p * q.eps).sum::<f64>();
                let mut acc = dot(&adj.f, &t.f) + dot(&adj.g, &t.g) + dot(&adj.sigma, &t.sigma);
                acc += adj.running_cost * t.running_cost.eps;
                for ((ac, ad), (tc, td)) in adj.rows.iter().zip(&t.rows) {
                    acc += dot(ac, tc) + ad * td.eps;
                }
                acc
            })
            .collect()
    }
}
