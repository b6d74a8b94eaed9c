//! Trains the safe pendulum controller and evaluates it on fresh noise.
//! Usage: `pendulum_train [iterations]` (default 201).

use safe_fbsde::config::{RunConfig, Task};
use safe_fbsde::trainer;

fn main() -> safe_fbsde::Result<()> {
    let mut cfg = RunConfig::preset(Task::PendulumBalance);
    if let Some(k) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        cfg.train.iterations = k;
    }
    let problem = cfg.problem()?;
    let out = trainer::train(&problem, &cfg.train, |l| {
        if l.iteration % 20 == 0 {
            println!("iter {:>3}  loss {:>10.4}  min h {:.4}  psi {:.3}", l.iteration, l.loss.total, l.min_h[0], l.psi);
        }
    })?;
    let ev = trainer::evaluate(&out.params, &problem, 128, cfg.train.seed)?;
    println!("eval: mean |theta(T) - pi| = {:.4}, min h = {:.4}, violations = {}",
        ev.stats.terminal_abs_error_mean[0], ev.stats.min_h[0], ev.stats.violations);
    Ok(())
}
