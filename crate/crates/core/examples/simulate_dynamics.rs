//! Open-loop Euler–Maruyama rollouts of the pendulum under zero control,
//! printing the spread of the angle over time.

use safe_fbsde::dynamics::*;

fn main() -> safe_fbsde::Result<()> {
    let sys = make_pendulum(PendulumParams::default())?;
    let (dt, steps, paths) = (0.02, 75, 500);
    let mut xs: Vec<Vec<f64>> = vec![vec![std::f64::consts::PI, 0.0]; paths];
    let mut streams: Vec<NoiseStream> = (0..paths as u64).map(|i| NoiseStream::new(0, i)).collect();
    for k in 1..=steps {
        for (x, s) in xs.iter_mut().zip(&mut streams) {
            let dw = sample_noise(s, sys.n_w(), dt)?;
            *x = euler_maruyama_step(&sys, x, &[0.0], dt, &dw)?;
        }
        if k % 15 == 0 {
            let mean = xs.iter().map(|x| x[0]).sum::<f64>() / paths as f64;
            let sd = (xs.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / paths as f64).sqrt();
            println!("t = {:.2}  theta mean {mean:.4}  std {sd:.4}", k as f64 * dt);
        }
    }
    Ok(())
}
