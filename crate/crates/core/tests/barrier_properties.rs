use proptest::prelude::*;
use safe_fbsde::barrier::*;
use safe_fbsde::dynamics::*;
use std::f64::consts::PI;

fn fd_grad(spec: &BarrierSpec, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = 1e-6 * x[i].abs().max(1.0);
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h;
            m[i] -= h;
            (spec.eval(&p) - spec.eval(&m)) / (2.0 * h)
        })
        .collect()
}

fn cases() -> Vec<(BarrierSpec, SystemModel)> {
    let pend = make_pendulum(PendulumParams::default()).unwrap();
    let cp = make_cartpole(CartPoleParams::default()).unwrap();
    let cars = make_car2d(3, Car2dParams { num_cars: 3, sigma: 0.1 }).unwrap();
    vec![
        (pendulum_box_barrier(2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.05, 0.5).unwrap(), pend),
        (cartpole_position_barrier(-5.0, 5.0, 0.1, 1.0).unwrap(), cp.clone()),
        (cartpole_angle_barrier(PI / 2.0, 3.0 * PI / 2.0, 10.0, 100.0).unwrap(), cp),
        (car_obstacle_barrier_for(1, 1.0, 0.0, 0.3, 0.05, 1.0).unwrap(), cars.clone()),
        (car_pair_barrier(0, 2, 0.05, 0.1, 1.0).unwrap(), cars),
    ]
}

fn arb_state(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #[test]
    fn gradient_matches_differences(x in arb_state(12)) {
        for (spec, sys) in cases() {
            let x = &x[..sys.n_x()];
            let g = spec.grad(x);
            for (a, n) in g.iter().zip(fd_grad(&spec, x)) {
                prop_assert!((a - n).abs() <= 1e-5 * (1.0 + a.abs()), "{spec:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn constraint_row_matches_definition(x in arb_state(12)) {
        for (spec, sys) in cases() {
            let x = &x[..sys.n_x()];
            let (n_x, n_u) = (sys.n_x(), sys.n_u());
            let (gh, f, g) = (spec.grad(x), sys.drift(x), sys.actuation(x));
            let row = constraint_row(&spec, &sys, x);
            for j in 0..n_u {
                let lg: f64 = (0..n_x).map(|i| gh[i] * g[i * n_u + j]).sum();
                prop_assert!((row.c_row[j] + lg).abs() <= 1e-12 * (1.0 + lg.abs()));
            }
            let lf: f64 = gh.iter().zip(&f).map(|(a, b)| a * b).sum();
            let d = spec.gamma * spec.eval(x) + lf + spec.trace_term(&sys, x);
            prop_assert!((row.d - d).abs() <= 1e-10 * (1.0 + d.abs()));
        }
    }

    #[test]
    fn trace_term_matches_hessian(x in arb_state(12)) {
        for (spec, sys) in cases() {
            let x = &x[..sys.n_x()];
            let n = sys.n_x();
            let (h, sst) = (spec.hessian(n), sys.diffusion_gram(x));
            let tr: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| h[i * n + j] * sst[j * n + i]).sum();
            prop_assert!((0.5 * tr - spec.trace_term(&sys, x)).abs() <= 1e-12);
        }
    }

    #[test]
    fn pendulum_barrier_positive_inside_bounds(theta in (2.0 * PI / 3.0 + 1e-6)..(4.0 * PI / 3.0 - 1e-6)) {
        let b = pendulum_box_barrier(2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.0, 0.5).unwrap();
        prop_assert!(b.eval(&[theta, 0.0]) > 0.0);
        prop_assert!(b.eval(&[theta + 2.0 * PI / 3.0 + 1e-3, 0.0]) < 0.0);
    }
}

#[test]
fn cartpole_angle_actuation_vanishes_at_horizontal() {
    let cp = make_cartpole(CartPoleParams::default()).unwrap();
    let spec = cartpole_angle_barrier(PI / 2.0, 3.0 * PI / 2.0, 0.1, 1.0).unwrap();
    let samples = vec![vec![0.0, PI, 0.0, 1.0], vec![0.0, PI / 2.0, 0.0, 1.0], vec![0.0, 3.0 * PI / 2.0, 0.0, -1.0]];
    let r = relative_degree_check(&spec, &cp, &samples, 1e-9);
    assert_eq!(r.flagged, vec![1, 2]);
    assert_eq!(r.nonzero, 1);
}

#[test]
fn euler_maruyama_is_affine_in_control_and_noise() {
    let sys = make_pendulum(PendulumParams::default()).unwrap();
    let x = [3.0, 0.2];
    let base = euler_maruyama_step(&sys, &x, &[0.0], 0.02, &[0.0, 0.0]).unwrap();
    let with_u = euler_maruyama_step(&sys, &x, &[1.0], 0.02, &[0.0, 0.0]).unwrap();
    let with_w = euler_maruyama_step(&sys, &x, &[0.0], 0.02, &[0.3, 0.1]).unwrap();
    assert_eq!(base[0], with_u[0]);
    assert!((with_u[1] - base[1] - 0.02 / 0.5).abs() < 1e-12);
    assert_eq!(with_w[0], base[0]);
    assert!((with_w[1] - base[1] - 0.1).abs() < 1e-12);
    assert!(euler_maruyama_step(&sys, &x, &[0.0, 1.0], 0.02, &[0.0, 0.0]).is_err());
}

#[test]
fn noise_streams_are_reproducible_and_distinct() {
    let a: Vec<f64> = NoiseStream::new(1, 2).sample(4, 0.02);
    assert_eq!(a, NoiseStream::new(1, 2).sample(4, 0.02));
    assert_ne!(a, NoiseStream::new(1, 3).sample(4, 0.02));
    assert_ne!(a, NoiseStream::new(2, 2).sample(4, 0.02));
    let mut s = NoiseStream::new(5, 0);
    let n = 20_000;
    let v: Vec<f64> = (0..n).flat_map(|_| s.sample(1, 0.02)).collect();
    let var = v.iter().map(|x| x * x).sum::<f64>() / n as f64;
    assert!((var - 0.02).abs() < 0.002, "{var}");
}
