#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use safe_fbsde::dynamics::NoiseStream;
use safe_fbsde::qp::{qp_backward, random_feasible_qp, solve_qp_pdipm, QpProblem, QpSettings, QpSolution};

/// Random QP whose solution is strictly complementary: every row has
/// either slack or multiplier above `margin`.
pub fn strict_qp(stream: &mut NoiseStream, margin: f64) -> (QpProblem, QpSolution) {
    loop {
        let n_u = 1 + (stream.uniform(0.0, 1.0) * 6.0) as usize;
        let n_q = (stream.uniform(0.0, 1.0) * 6.0) as usize;
        let p = random_feasible_qp(stream, n_u, n_q);
        let Ok(sol) = solve_qp_pdipm(&p, &QpSettings::default()) else { continue };
        if (0..n_q).all(|i| sol.s[i].max(sol.lambda[i]) > margin) {
            return (p, sol);
        }
    }
}

/// Normwise relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)` between the
/// analytic vector-Jacobian product of `gᵀu(q, C, d)` and fourth-order
/// central differences of step `h` over every entry of `q`, `C` and `d`.
pub fn backward_fd_error(p: &QpProblem, sol: &QpSolution, g: &DVector<f64>, h: f64, floor: f64) -> f64 {
    let back = qp_backward(p, sol, g, 1e-9).expect("backward");
    let settings = QpSettings::default();
    let f = |pp: &QpProblem| g.dot(&solve_qp_pdipm(pp, &settings).expect("perturbed solve").u);
    let central = |perturb: &dyn Fn(&mut QpProblem, f64)| {
        let at = |e: f64| {
            let mut m = p.clone();
            perturb(&mut m, e);
            f(&m)
        };
        (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
    };
    let mut pairs = Vec::new();
    for j in 0..p.n_u() {
        pairs.push((back.grad_q[j], central(&|m, e| m.q[j] += e)));
    }
    for i in 0..p.n_q() {
        pairs.push((back.grad_d[i], central(&|m, e| m.d[i] += e)));
        for j in 0..p.n_u() {
            pairs.push((back.grad_c[(i, j)], central(&|m, e| m.c[(i, j)] += e)));
        }
    }
    let diff = pairs.iter().map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = pairs.iter().map(|(a, n)| a.abs().max(n.abs())).fold(floor, f64::max);
    diff / scale
}

pub fn random_direction(stream: &mut NoiseStream, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| stream.standard_normal())
}

pub fn dense(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}
