mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use safe_fbsde::dynamics::NoiseStream;
use safe_fbsde::qp::*;

fn arb_qp() -> impl Strategy<Value = QpProblem> {
    (1usize..=6, 0usize..=6, any::<u64>()).prop_map(|(n_u, n_q, seed)| {
        let mut s = NoiseStream::new(seed, 17);
        random_feasible_qp(&mut s, n_u, n_q)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn solution_is_feasible_and_matches_oracle(p in arb_qp()) {
        let sol = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
        let oracle = brute_force_qp_oracle(&p).unwrap();
        prop_assert!(p.violation(&sol.u) <= 1e-8 * (1.0 + p.d.amax()));
        prop_assert!((&sol.u - &oracle.u).amax() <= 1e-6);
        prop_assert!(sol.lambda.iter().all(|l| *l >= 0.0));
        prop_assert!(sol.s.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn kkt_stationarity_holds(p in arb_qp()) {
        let sol = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
        let r = &p.q_mat * &sol.u + &p.q + p.c.transpose() * &sol.lambda;
        prop_assert!(r.amax() <= 1e-6 * (1.0 + p.q.amax()));
        let comp = sol.s.component_mul(&sol.lambda);
        prop_assert!(comp.iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn unconstrained_is_newton_step(n in 1usize..6, seed in any::<u64>()) {
        let mut s = NoiseStream::new(seed, 3);
        let p = random_feasible_qp(&mut s, n, 0);
        let sol = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
        let direct = p.q_mat.clone().cholesky().unwrap().solve(&(-&p.q));
        prop_assert!((&sol.u - direct).amax() <= 1e-10 * (1.0 + sol.u.amax()));
    }

    #[test]
    fn objective_not_above_any_feasible_point(p in arb_qp(), seed in any::<u64>()) {
        let sol = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
        let mut s = NoiseStream::new(seed, 5);
        for _ in 0..20 {
            let cand = &sol.u + DVector::from_fn(p.n_u(), |_, _| s.standard_normal());
            if p.violation(&cand) <= 0.0 {
                prop_assert!(p.objective(&sol.u) <= p.objective(&cand) + 1e-9);
            }
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    for i in 0..50 {
        let mut s = NoiseStream::new(4, i);
        let (p, sol) = common::strict_qp(&mut s, 1e-3);
        let g = common::random_direction(&mut s, p.n_u());
        let e = common::backward_fd_error(&p, &sol, &g, 1e-5, 1e-6);
        assert!(e <= 1e-5, "instance {i}: {e:e}");
    }
}

#[test]
fn backward_of_inactive_rows_is_zero() {
    let q_mat = DMatrix::identity(2, 2);
    let p = QpProblem::new(q_mat, DVector::from_vec(vec![1.0, -1.0]), common::dense(1, 2, &[1.0, 0.0]), DVector::from_vec(vec![5.0]))
        .unwrap();
    let sol = solve_qp_pdipm(&p, &QpSettings::default()).unwrap();
    let back = qp_backward(&p, &sol, &DVector::from_vec(vec![1.0, 2.0]), 1e-9).unwrap();
    assert!(back.grad_d[0].abs() < 1e-9);
    assert!(back.grad_c.amax() < 1e-8);
    assert!((back.grad_q - DVector::from_vec(vec![-1.0, -2.0])).amax() < 1e-8);
}

#[test]
fn fuzz_report_is_clean() {
    let r = qp_fuzz(300, 11, 1e-6, &QpSettings::default());
    assert_eq!((r.instances, r.mismatches, r.solver_failures), (300, 0, 0));
}

#[test]
fn infeasible_problem_is_reported() {
    let c = common::dense(2, 1, &[1.0, -1.0]);
    let p = QpProblem::new(DMatrix::identity(1, 1), DVector::zeros(1), c, DVector::from_vec(vec![-1.0, -1.0])).unwrap();
    assert!(matches!(solve_qp_pdipm(&p, &QpSettings::default()), Err(safe_fbsde::Error::InfeasibleProblem { .. })));
}
