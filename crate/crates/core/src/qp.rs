//! Differentiable QP layer.
//!
//! Solves `min ½uᵀQu + qᵀu  s.t.  Cu ≤ d` with a Mehrotra predictor-corrector
//! primal-dual interior-point method and differentiates the solution map by
//! implicit differentiation of the KKT conditions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::ConstraintRow;
use crate::dynamics::NoiseStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// Quadratic term, symmetric positive definite.
    pub q_mat: DMatrix<f64>,
    pub q: DVector<f64>,
    /// Inequality matrix, `n_q × n_u`.
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// Slacks `d − Cu`.
    pub s: DVector<f64>,
    pub lambda: DVector<f64>,
    pub iterations: usize,
    /// Final KKT residual: max of dual residual, primal residual and duality measure.
    pub residual: f64,
    /// True when the active-set refinement replaced the interior iterate.
    pub polished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpBackward {
    pub grad_q: DVector<f64>,
    pub grad_c: DMatrix<f64>,
    pub grad_d: DVector<f64>,
    pub grad_q_mat: DMatrix<f64>,
    /// True when the KKT system was singular and `ε_reg` had to be added.
    pub regularized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iters: usize,
    /// Diagonal regularization for the Newton and KKT systems.
    pub reg: f64,
    /// Floor for initial slacks.
    pub s_min: f64,
    /// Fraction-to-boundary factor.
    pub step_factor: f64,
    /// Snap the interior iterate onto its identified active set.
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 20, reg: 1e-9, s_min: 1e-2, step_factor: 0.995, polish: true }
    }
}

impl QpProblem {
    pub fn new(q_mat: DMatrix<f64>, q: DVector<f64>, c: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        let n = q.len();
        if q_mat.nrows() != n || q_mat.ncols() != n {
            return Err(Error::ShapeMismatch(format!("Q is {}x{}, q has {n}", q_mat.nrows(), q_mat.ncols())));
        }
        if c.ncols() != n || c.nrows() != d.len() {
            return Err(Error::ShapeMismatch(format!(
                "C is {}x{}, d has {}, n_u = {n}",
                c.nrows(),
                c.ncols(),
                d.len()
            )));
        }
        check_spd(&q_mat)?;
        Ok(Self { q_mat, q, c, d })
    }

    pub fn unconstrained(q_mat: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(q_mat, q, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn n_u(&self) -> usize {
        self.q.len()
    }

    pub fn n_q(&self) -> usize {
        self.d.len()
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.q_mat * u)) + self.q.dot(u)
    }

    /// Largest constraint violation `max(Cu − d, 0)`.
    pub fn violation(&self, u: &DVector<f64>) -> f64 {
        (&self.c * u - &self.d).iter().fold(0.0_f64, |m, v| m.max(*v))
    }
}

pub(crate) fn check_spd(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    let scale = m.amax().max(1.0);
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidParameter("quadratic term is not symmetric".into()));
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) || m.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter("quadratic term is not positive definite".into()));
    }
    Ok(())
}

/// `Q = R`, `q = G(x)ᵀV_x`, rows of `C`, `d` stacked from the barrier rows.
///
/// `g` is the row-major `n_x × n_u` actuation matrix at the current state.
pub fn assemble_hamiltonian_qp(
    r: &DMatrix<f64>,
    g: &[f64],
    v_x: &[f64],
    rows: &[ConstraintRow],
) -> Result<QpProblem> {
    let n_u = r.nrows();
    let n_x = v_x.len();
    if g.len() != n_x * n_u {
        return Err(Error::ShapeMismatch(format!("G has {} entries, expected {n_x}x{n_u}", g.len())));
    }
    let q = DVector::from_fn(n_u, |j, _| (0..n_x).map(|i| g[i * n_u + j] * v_x[i]).sum());
    let mut c = DMatrix::zeros(rows.len(), n_u);
    let mut d = DVector::zeros(rows.len());
    for (k, row) in rows.iter().enumerate() {
        if row.c_row.len() != n_u {
            return Err(Error::ShapeMismatch(format!("constraint row {k} has {} columns", row.c_row.len())));
        }
        for j in 0..n_u {
            c[(k, j)] = row.c_row[j];
        }
        d[k] = row.d;
    }
    QpProblem::new(r.clone(), q, c, d)
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Largest `α ∈ (0, 1]` keeping `v + α·dv ≥ 0`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut a = 1.0_f64;
    for (x, dx) in v.iter().zip(dv.iter()) {
        if *dx < 0.0 {
            a = a.min(-x / dx);
        }
    }
    a
}

struct Iterate {
    u: DVector<f64>,
    s: DVector<f64>,
    lambda: DVector<f64>,
}

/// Residual pieces `(r_d, r_p, μ)` for a problem restricted to the kept rows.
fn residuals(p: &QpProblem, it: &Iterate) -> (DVector<f64>, DVector<f64>, f64) {
    let rd = &p.q_mat * &it.u + &p.q + p.c.transpose() * &it.lambda;
    let rp = &p.c * &it.u + &it.s - &p.d;
    let m = p.n_q();
    let mu = if m == 0 { 0.0 } else { it.s.dot(&it.lambda) / m as f64 };
    (rd, rp, mu)
}

fn kkt_residual(p: &QpProblem, it: &Iterate) -> f64 {
    let (rd, rp, mu) = residuals(p, it);
    inf_norm(&rd).max(inf_norm(&rp)).max(mu.abs())
}

/// Factorization of the reduced Newton matrix `Q + CᵀWC`, `W = Λ/S`.
struct NewtonSystem {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    w: DVector<f64>,
}

impl NewtonSystem {
    fn new(p: &QpProblem, it: &Iterate, reg: f64) -> Result<Self> {
        let w = it.lambda.component_div(&it.s);
        let mut wc = p.c.clone();
        for (k, mut r) in wc.row_iter_mut().enumerate() {
            r.scale_mut(w[k]);
        }
        let mut m = &p.q_mat + p.c.transpose() * wc;
        for i in 0..m.nrows() {
            m[(i, i)] += reg;
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::NumericalFailure("reduced Newton matrix is not positive definite".into()))?;
        Ok(Self { chol, w })
    }

    /// Direction for the perturbed KKT system with complementarity
    /// right-hand side `rc`.
    fn direction(
        &self,
        p: &QpProblem,
        it: &Iterate,
        rd: &DVector<f64>,
        rp: &DVector<f64>,
        rc: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let rc_s = rc.component_div(&it.s);
        let rhs = -rd - p.c.tr_mul(&(self.w.component_mul(rp) - &rc_s));
        let du = self.chol.solve(&rhs);
        let cdu = &p.c * &du;
        let dlambda = self.w.component_mul(&(&cdu + rp)) - rc_s;
        let ds = -rp - cdu;
        if du.iter().chain(dlambda.iter()).chain(ds.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite Newton direction".into()));
        }
        Ok((du, ds, dlambda))
    }
}

fn unconstrained_minimizer(q_mat: &DMatrix<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = q_mat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("Q is not positive definite".into()))?;
    Ok(-chol.solve(q))
}

/// Primal-dual interior-point solve.
///
/// Rows with an identically zero `c_row` are screened first: they are
/// inactive when `d ≥ 0` and make the problem infeasible otherwise.
pub fn solve_qp_pdipm(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    let (n_u, n_q) = (problem.n_u(), problem.n_q());
    let mut keep = Vec::with_capacity(n_q);
    let mut bad = Vec::new();
    for i in 0..n_q {
        if problem.c.row(i).iter().all(|v| *v == 0.0) {
            if problem.d[i] < 0.0 {
                bad.push(i);
            }
        } else {
            keep.push(i);
        }
    }
    if !bad.is_empty() {
        let violation = bad.iter().map(|&i| -problem.d[i]).fold(0.0, f64::max);
        return Err(Error::InfeasibleProblem { rows: bad, violation });
    }

    let u0 = unconstrained_minimizer(&problem.q_mat, &problem.q)?;
    if keep.is_empty() {
        let s = problem.d.clone() - &problem.c * &u0;
        let sub = QpProblem {
            q_mat: problem.q_mat.clone(),
            q: problem.q.clone(),
            c: DMatrix::zeros(0, n_u),
            d: DVector::zeros(0),
        };
        let it = Iterate { u: u0, s: DVector::zeros(0), lambda: DVector::zeros(0) };
        let residual = kkt_residual(&sub, &it);
        return Ok(QpSolution { u: it.u, s, lambda: DVector::zeros(n_q), iterations: 0, residual, polished: false });
    }

    let sub = QpProblem {
        q_mat: problem.q_mat.clone(),
        q: problem.q.clone(),
        c: problem.c.select_rows(keep.iter()),
        d: problem.d.select_rows(keep.iter()),
    };
    let m = keep.len();
    // equivalent problem with unit-diagonal Q and unit-norm rows
    let col = DVector::from_fn(n_u, |j, _| 1.0 / sub.q_mat[(j, j)].sqrt());
    let mut c_s = sub.c.clone();
    for j in 0..n_u {
        c_s.column_mut(j).scale_mut(col[j]);
    }
    let row = DVector::from_fn(m, |k, _| c_s.row(k).norm());
    for k in 0..m {
        c_s.row_mut(k).unscale_mut(row[k]);
    }
    let sc = QpProblem {
        q_mat: DMatrix::from_fn(n_u, n_u, |i, j| sub.q_mat[(i, j)] * col[i] * col[j]),
        q: sub.q.component_mul(&col),
        c: c_s,
        d: sub.d.component_div(&row),
    };
    let u0s = u0.component_div(&col);
    let s0 = (&sc.d - &sc.c * &u0s).map(|v| v.max(settings.s_min));
    let mut it = Iterate { u: u0s, s: s0, lambda: DVector::from_element(m, 1.0) };

    let mut best = (f64::INFINITY, it.u.clone(), it.s.clone(), it.lambda.clone());
    let mut iterations = 0;
    loop {
        let (rd, rp, mu) = residuals(&sc, &it);
        let res = inf_norm(&rd).max(inf_norm(&rp)).max(mu);
        if res < best.0 {
            best = (res, it.u.clone(), it.s.clone(), it.lambda.clone());
        }
        if res <= settings.tol || iterations >= settings.max_iters {
            break;
        }
        // a diverging iterate on an infeasible problem ends the loop; the
        // violation check below reports it
        let Ok(sys) = NewtonSystem::new(&sc, &it, settings.reg) else {
            break;
        };
        // predictor
        let rc = it.s.component_mul(&it.lambda);
        let Ok((_, ds, dl)) = sys.direction(&sc, &it, &rd, &rp, &rc) else {
            break;
        };
        let a_aff = max_step(&it.s, &ds).min(max_step(&it.lambda, &dl));
        let mu_aff = (&it.s + a_aff * &ds).dot(&(&it.lambda + a_aff * &dl)) / m as f64;
        let sigma = (mu_aff / mu).powi(3);
        // centering-corrector, with the plain centering step as a fallback
        // when the second-order term overshoots
        let target = DVector::from_element(m, sigma * mu);
        let corrected = &rc + ds.component_mul(&dl) - &target;
        let centered = &rc - &target;
        let mut next: Option<(f64, Iterate)> = None;
        for rc in [corrected, centered] {
            let Ok((du, ds, dl)) = sys.direction(&sc, &it, &rd, &rp, &rc) else {
                continue;
            };
            let alpha = (settings.step_factor * max_step(&it.s, &ds).min(max_step(&it.lambda, &dl))).min(1.0);
            // the complementarity gap is quadratic along the step and can grow
            // for long steps; shorter ones are tried as well
            for a in [alpha, 0.5 * alpha, 0.25 * alpha] {
                let cand = Iterate { u: &it.u + a * &du, s: &it.s + a * &ds, lambda: &it.lambda + a * &dl };
                let merit = kkt_residual(&sc, &cand);
                if next.as_ref().is_none_or(|(m, _)| merit < *m) {
                    next = Some((merit, cand));
                }
            }
        }
        let Some((_, cand)) = next else {
            break;
        };
        it = cand;
        iterations += 1;
        if !(it.u.iter().chain(it.s.iter()).chain(it.lambda.iter()).all(|v| v.is_finite())) {
            break;
        }
    }
    let (best_res, u, s, lambda) = best;
    let mut it = Iterate { u, s, lambda };
    let mut polished = false;
    if settings.polish {
        if let Some(p) = polish(&sc, &it, best_res) {
            it = p;
            polished = true;
        }
    }
    // feasibility is judged on the normalized rows
    let feas_tol = settings.tol.sqrt().max(1e-7);
    let gap = &sc.c * &it.u - &sc.d;
    let it = Iterate {
        u: it.u.component_mul(&col),
        s: it.s.component_mul(&row),
        lambda: it.lambda.component_div(&row),
    };
    let residual = kkt_residual(&sub, &it);
    if gap.iter().any(|g| *g > feas_tol) {
        let rows = keep.iter().enumerate().filter(|(k, _)| gap[*k] > feas_tol).map(|(_, &i)| i).collect();
        return Err(Error::InfeasibleProblem { rows, violation: sub.violation(&it.u) });
    }

    let mut lambda = DVector::zeros(n_q);
    for (k, &i) in keep.iter().enumerate() {
        lambda[i] = it.lambda[k];
    }
    let mut s = &problem.d - &problem.c * &it.u;
    for (k, &i) in keep.iter().enumerate() {
        s[i] = it.s[k];
    }
    Ok(QpSolution { u: it.u, s, lambda, iterations, residual, polished })
}

/// Solve the equality-constrained KKT system on the active set suggested by
/// the interior iterate and keep it when it is primal and dual feasible.
fn polish(p: &QpProblem, it: &Iterate, ipm_residual: f64) -> Option<Iterate> {
    let active: Vec<usize> = (0..p.n_q()).filter(|&i| it.lambda[i] > it.s[i]).collect();
    let (u, la) = solve_equality_kkt(p, &active)?;
    let mut lambda = DVector::zeros(p.n_q());
    for (k, &i) in active.iter().enumerate() {
        if la[k] < 0.0 {
            return None;
        }
        lambda[i] = la[k];
    }
    let mut s = &p.d - &p.c * &u;
    let scale = 1.0 + inf_norm(&p.d);
    if s.iter().any(|v| *v < -1e-12 * scale) {
        return None;
    }
    for &i in &active {
        s[i] = 0.0;
    }
    s.apply(|v| *v = v.max(0.0));
    let cand = Iterate { u, s, lambda };
    let res = kkt_residual(p, &cand);
    (res <= ipm_residual.max(1e-10)).then_some(cand)
}

/// Minimizer with rows `active` held at equality. `None` when the KKT matrix
/// is singular or the active rows are linearly dependent.
fn solve_equality_kkt(p: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let (n, k) = (p.n_u(), active.len());
    if k > n {
        return None;
    }
    if k > 0 {
        let ca = p.c.select_rows(active.iter());
        let sv = ca.clone().svd(false, false).singular_values;
        let smax = sv.max();
        if smax == 0.0 || sv.min() <= 1e-10 * smax {
            return None;
        }
    }
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.q_mat);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&p.q));
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = p.c[(i, j)];
            kkt[(j, n + r)] = p.c[(i, j)];
        }
        rhs[n + r] = p.d[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
}

/// Vector-Jacobian product through the solution map `(Q, q, C, d) ↦ ū`.
///
/// Solves `[Q, CᵀΛ; C, −S][a; b] = [g; 0]` and returns `∇q = −a`,
/// `∇d = Λb`, `∇C = −λaᵀ − Λbūᵀ`, `∇Q = −½(aūᵀ + ūaᵀ)`.
pub fn qp_backward(
    problem: &QpProblem,
    solution: &QpSolution,
    upstream_grad_u: &DVector<f64>,
    reg: f64,
) -> Result<QpBackward> {
    let (n, m) = (problem.n_u(), problem.n_q());
    if upstream_grad_u.len() != n {
        return Err(Error::ShapeMismatch(format!("upstream gradient has {} entries, n_u = {n}", upstream_grad_u.len())));
    }
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(&problem.q_mat);
    for i in 0..m {
        for j in 0..n {
            k[(j, n + i)] = problem.c[(i, j)] * solution.lambda[i];
            k[(n + i, j)] = problem.c[(i, j)];
        }
        k[(n + i, n + i)] = -solution.s[i];
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(upstream_grad_u);

    let degenerate = (0..m).any(|i| solution.s[i] == 0.0 && solution.lambda[i] == 0.0);
    let mut regularized = false;
    let direct = if degenerate { None } else { k.clone().lu().solve(&rhs) };
    let sol = match direct.filter(|v| v.iter().all(|x| x.is_finite())) {
        Some(v) => v,
        None => {
            regularized = true;
            for i in 0..n {
                k[(i, i)] += reg;
            }
            for i in 0..m {
                k[(n + i, n + i)] -= reg;
            }
            k.lu()
                .solve(&rhs)
                .filter(|v| v.iter().all(|x| x.is_finite()))
                .ok_or_else(|| Error::NumericalFailure("KKT system singular after regularization".into()))?
        }
    };
    let a = sol.rows(0, n).into_owned();
    let b = sol.rows(n, m).into_owned();
    let lb = solution.lambda.component_mul(&b);
    let grad_q = -&a;
    let grad_d = lb.clone();
    let grad_c = -(&solution.lambda * a.transpose()) - &lb * solution.u.transpose();
    let grad_q_mat = -0.5 * (&a * solution.u.transpose() + &solution.u * a.transpose());
    Ok(QpBackward { grad_q, grad_c, grad_d, grad_q_mat, regularized })
}

/// Exhaustive active-set enumeration; reference solver for tests.
pub fn brute_force_qp_oracle(problem: &QpProblem) -> Result<QpSolution> {
    let (n, m) = (problem.n_u(), problem.n_q());
    if m > 12 {
        return Err(Error::InvalidParameter(format!("oracle limited to 12 constraints, got {m}")));
    }
    let scale = 1.0 + inf_norm(&problem.d);
    let mut best: Option<(f64, usize, DVector<f64>, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let Some((u, la)) = solve_equality_kkt(problem, &active) else { continue };
        if la.iter().any(|v| *v < -1e-9) || problem.violation(&u) > 1e-9 * scale {
            continue;
        }
        let obj = problem.objective(&u);
        let better = match &best {
            None => true,
            Some((bo, bk, _, _)) => {
                let tie = (obj - bo).abs() <= 1e-12 * (1.0 + bo.abs());
                if tie { active.len() < *bk } else { obj < *bo }
            }
        };
        if better {
            let mut lambda = DVector::zeros(m);
            for (k, &i) in active.iter().enumerate() {
                lambda[i] = la[k].max(0.0);
            }
            best = Some((obj, active.len(), u, lambda));
        }
    }
    let (_, _, u, lambda) = best.ok_or_else(|| Error::InfeasibleProblem {
        rows: (0..m).collect(),
        violation: f64::NAN,
    })?;
    let s = (&problem.d - &problem.c * &u).map(|v| v.max(0.0));
    let it = Iterate { u, s, lambda };
    let residual = kkt_residual(problem, &it);
    let _ = n;
    Ok(QpSolution { u: it.u, s: it.s, lambda: it.lambda, iterations: 0, residual, polished: false })
}

/// Random strictly feasible QP: `Q = AᵀA + 0.1·I`, Gaussian `q` and `C`, and
/// `d = C·u_f + slack` around a random point `u_f`.
pub fn random_feasible_qp(stream: &mut NoiseStream, n_u: usize, n_q: usize) -> QpProblem {
    let a = DMatrix::from_fn(n_u, n_u, |_, _| stream.standard_normal());
    let mut q_mat = a.transpose() * &a;
    for i in 0..n_u {
        q_mat[(i, i)] += 0.1;
    }
    let q = DVector::from_fn(n_u, |_, _| 3.0 * stream.standard_normal());
    let c = DMatrix::from_fn(n_q, n_u, |_, _| stream.standard_normal());
    let u_f = DVector::from_fn(n_u, |_, _| stream.standard_normal());
    let d = &c * &u_f + DVector::from_fn(n_q, |_, _| stream.uniform(0.05, 1.0));
    QpProblem { q_mat, q, c, d }
}

/// Outcome of comparing the interior-point solver with the brute-force oracle.
#[derive(Debug, Clone, Serialize)]
pub struct FuzzReport {
    pub instances: usize,
    pub mismatches: usize,
    pub solver_failures: usize,
    pub max_abs_diff: f64,
    pub mean_iterations: f64,
}

/// `count` random feasible problems with `n_u ∈ 1..=8`, `n_q ∈ 0..=6`;
/// a mismatch is `‖Δu‖∞ > tol`.
pub fn qp_fuzz(count: usize, seed: u64, tol: f64, settings: &QpSettings) -> FuzzReport {
    use rayon::prelude::*;
    let results: Vec<(Option<f64>, usize)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut stream = NoiseStream::new(seed, i as u64);
            let n_u = 1 + (stream.uniform(0.0, 8.0) as usize).min(7);
            let n_q = (stream.uniform(0.0, 7.0) as usize).min(6);
            let p = random_feasible_qp(&mut stream, n_u, n_q);
            match (solve_qp_pdipm(&p, settings), brute_force_qp_oracle(&p)) {
                (Ok(a), Ok(b)) => (Some((&a.u - &b.u).amax()), a.iterations),
                _ => (None, 0),
            }
        })
        .collect();
    let solver_failures = results.iter().filter(|r| r.0.is_none()).count();
    let diffs: Vec<f64> = results.iter().filter_map(|r| r.0).collect();
    FuzzReport {
        instances: count,
        mismatches: diffs.iter().filter(|d| !(**d <= tol)).count() + solver_failures,
        solver_failures,
        max_abs_diff: diffs.iter().copied().fold(0.0, f64::max),
        mean_iterations: results.iter().map(|r| r.1).sum::<usize>() as f64 / count.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(qm: f64, q: f64, c: &[f64], d: &[f64]) -> QpProblem {
        QpProblem::new(
            DMatrix::from_element(1, 1, qm),
            DVector::from_element(1, q),
            DMatrix::from_column_slice(c.len(), 1, c),
            DVector::from_column_slice(d),
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_closed_form() {
        let q = DVector::from_vec(vec![0.3, -1.2, 4.0]);
        let p = QpProblem::unconstrained(DMatrix::identity(3, 3), q.clone()).unwrap();
        let s = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
        assert_eq!(s.u, -&q);
        assert_eq!(brute_force_qp_oracle(&p).unwrap().u, -q);
    }

    #[test]
    fn one_dimensional_active() {
        let p = scalar(1.0, 0.0, &[-1.0], &[-1.0]);
        let s = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
        assert_relative_eq!(s.u[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(s.lambda[0], 1.0, epsilon = 1e-8);
        let o = brute_force_qp_oracle(&p).unwrap();
        assert_relative_eq!(o.u[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(o.lambda[0], 1.0, epsilon = 1e-14);

        for g in [1.0, -2.5] {
            let b = qp_backward(&p, &s, &DVector::from_element(1, g), 1e-9).unwrap();
            assert_relative_eq!(b.grad_d[0], -g, epsilon = 1e-8);
            assert!(b.grad_q[0].abs() < 1e-8);
        }
    }

    #[test]
    fn one_dimensional_inactive() {
        let p = scalar(1.0, 1.0, &[1.0], &[10.0]);
        let s = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
        assert_relative_eq!(s.u[0], -1.0, epsilon = 1e-10);
        assert!(s.lambda[0].abs() < 1e-9);
        let b = qp_backward(&p, &s, &DVector::from_element(1, 3.0), 1e-9).unwrap();
        assert!(b.grad_d[0].abs() < 1e-9);
        assert_relative_eq!(b.grad_q[0], -3.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_rows() {
        let p = scalar(2.0, 1.0, &[0.0], &[0.5]);
        let s = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
        assert_relative_eq!(s.u[0], -0.5, epsilon = 1e-15);
        assert_eq!(s.lambda[0], 0.0);
        let p = scalar(2.0, 1.0, &[0.0, 1.0], &[-0.5, 3.0]);
        match solve_qp_pdipm(&p, &QpSettings::default()) {
            Err(Error::InfeasibleProblem { rows, .. }) => assert_eq!(rows, vec![0]),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn infeasible_detected() {
        // u ≤ −1 and u ≥ 1
        let p = scalar(1.0, 0.0, &[1.0, -1.0], &[-1.0, -1.0]);
        let r = solve_qp_pdipm(&p, &QpSettings::default());
        assert!(matches!(r, Err(Error::InfeasibleProblem { .. })), "{r:?}");
        assert!(matches!(brute_force_qp_oracle(&p), Err(Error::InfeasibleProblem { .. })));
    }

    #[test]
    fn rejects_non_spd() {
        let bad = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), DVector::zeros(2));
        assert!(bad.is_err());
        let asym = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), DVector::zeros(2));
        assert!(asym.is_err());
    }

    #[test]
    fn hamiltonian_assembly() {
        let r = DMatrix::from_element(1, 1, 0.7);
        let g = [0.0, 2.0];
        let p = assemble_hamiltonian_qp(&r, &g, &[3.0, -1.5], &[]).unwrap();
        assert_eq!(p.q[0], -3.0);
        assert_eq!(p.n_q(), 0);
        let rows = vec![ConstraintRow { c_row: vec![0.2], d: 1.0 }];
        let p = assemble_hamiltonian_qp(&r, &g, &[3.0, -1.5], &rows).unwrap();
        assert_eq!((p.c[(0, 0)], p.d[0]), (0.2, 1.0));
        let not_spd = DMatrix::from_element(1, 1, -1.0);
        assert!(assemble_hamiltonian_qp(&not_spd, &g, &[3.0, -1.5], &[]).is_err());
    }

    #[test]
    fn weakly_active_backward_is_regularized() {
        // unconstrained optimum sits exactly on the boundary u ≤ 0
        let p = scalar(1.0, 0.0, &[1.0], &[0.0]);
        let sol = QpSolution {
            u: DVector::zeros(1),
            s: DVector::zeros(1),
            lambda: DVector::zeros(1),
            iterations: 0,
            residual: 0.0,
            polished: true,
        };
        let b = qp_backward(&p, &sol, &DVector::from_element(1, 1.0), 1e-9).unwrap();
        assert!(b.regularized);
        assert!(b.grad_q.iter().all(|v| v.is_finite()));
    }
}
