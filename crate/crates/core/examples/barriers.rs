//! Barrier values and CBF constraint rows for each system, plus the
//! relative-degree probe that exposes where actuation stops acting on `h`.

use std::f64::consts::PI;

use safe_fbsde::barrier::*;
use safe_fbsde::dynamics::*;

fn show(name: &str, b: &BarrierSpec, sys: &SystemModel, x: &[f64]) {
    let row = constraint_row(b, sys, x);
    println!("{name:<22} h = {:>9.4}  C = {:?}  d = {:.4}", b.eval(x), row.c_row, row.d);
}

fn main() -> safe_fbsde::Result<()> {
    let pend = make_pendulum(PendulumParams::default())?;
    let cp = make_cartpole(CartPoleParams::default())?;
    let cars = make_car2d(2, Car2dParams { num_cars: 2, sigma: 0.1 })?;

    let pb = pendulum_box_barrier(2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.05, 0.5)?;
    show("pendulum, upright", &pb, &pend, &[PI, 0.0]);
    show("pendulum, near bound", &pb, &pend, &[4.0, 1.5]);

    let pos = cartpole_position_barrier(-5.0, 5.0, 0.1, 1.0)?;
    let ang = cartpole_angle_barrier(PI / 2.0, 3.0 * PI / 2.0, 0.1, 1.0)?;
    show("cart position", &pos, &cp, &[4.0, PI, 1.0, 0.0]);
    show("cart-pole angle", &ang, &cp, &[0.0, 2.5, 0.0, -1.0]);

    let obs = car_obstacle_barrier_for(0, 1.0, 1.0, 0.3, 0.05, 1.0)?;
    let pair = car_pair_barrier(0, 1, 0.05, 0.1, 1.0)?;
    let x = [0.5, 0.5, PI / 4.0, 0.5, 1.5, 0.5, 3.0 * PI / 4.0, 0.5];
    show("car obstacle", &obs, &cars, &x);
    show("car pair", &pair, &cars, &x);

    let samples: Vec<Vec<f64>> = (0..=8).map(|k| vec![0.0, PI / 2.0 + k as f64 * PI / 8.0, 0.0, 1.0]).collect();
    let r = relative_degree_check(&ang, &cp, &samples, 1e-9);
    println!("cart-pole angle barrier: L_g h vanishes at samples {:?} of {}", r.flagged, r.samples);
    Ok(())
}
