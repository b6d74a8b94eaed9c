//! Solves a small CBF-style QP with the interior-point solver, checks it
//! against active-set enumeration and differentiates through it.

use nalgebra::{DMatrix, DVector};
use safe_fbsde::qp::{brute_force_qp_oracle, qp_backward, solve_qp_pdipm, QpProblem, QpSettings};

fn main() -> safe_fbsde::Result<()> {
    let q_mat = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let q = DVector::from_vec(vec![-4.0, 1.0]);
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, -1.0, 0.5]);
    let d = DVector::from_vec(vec![0.0, 2.0]);
    let p = QpProblem::new(q_mat, q, c, d)?;

    let sol = solve_qp_pdipm(&p, &QpSettings::default())?;
    let oracle = brute_force_qp_oracle(&p)?;
    println!("u        = {:?}", sol.u.as_slice());
    println!("lambda   = {:?}", sol.lambda.as_slice());
    println!("slack    = {:?}", sol.s.as_slice());
    println!("iters {}, residual {:.1e}, polished {}", sol.iterations, sol.residual, sol.polished);
    println!("|u - u_oracle| = {:.1e}", (&sol.u - &oracle.u).amax());

    // d(u₀)/d(q, C, d)
    let back = qp_backward(&p, &sol, &DVector::from_vec(vec![1.0, 0.0]), 1e-9)?;
    println!("du0/dq = {:?}", back.grad_q.as_slice());
    println!("du0/dd = {:?}", back.grad_d.as_slice());
    println!("du0/dC = {}", back.grad_c);
    Ok(())
}
