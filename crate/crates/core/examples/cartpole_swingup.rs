//! Reduced-scale cart-pole swing-up with position bounds.
//! Usage: `cartpole_swingup [iterations]` (default 50).

use safe_fbsde::config::{RunConfig, Task};
use safe_fbsde::trainer;

fn main() -> safe_fbsde::Result<()> {
    let mut cfg = RunConfig::preset(Task::CartpoleSwingup);
    cfg.train.iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(50);
    let problem = cfg.problem()?;
    let out = trainer::train(&problem, &cfg.train, |l| {
        if l.iteration % 10 == 0 {
            println!("iter {:>4}  loss {:>10.3}  min h {:.3}", l.iteration, l.loss.total, l.min_h[0]);
        }
    })?;
    let ev = trainer::evaluate(&out.params, &problem, 64, cfg.train.seed)?;
    println!("eval: mean |x(T) - goal| = {:?}", ev.stats.terminal_abs_error_mean);
    Ok(())
}
