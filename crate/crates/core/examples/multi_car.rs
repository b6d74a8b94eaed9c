//! Reduced-scale four-car crossing with pairwise collision barriers.
//! Usage: `multi_car [iterations]` (default 10).

use safe_fbsde::config::{RunConfig, Task};
use safe_fbsde::trainer;

fn main() -> safe_fbsde::Result<()> {
    let mut cfg = RunConfig::preset(Task::CarMulti);
    cfg.train.iterations = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let problem = cfg.problem()?;
    let out = trainer::train(&problem, &cfg.train, |l| {
        let closest = l.min_h.iter().copied().fold(f64::INFINITY, f64::min);
        println!("iter {:>4}  loss {:>9.3}  closest pair h {:.4}  qp iters {:.1}", l.iteration, l.loss.total, closest, l.qp.mean_iterations);
    })?;
    for w in &out.worst_cases {
        println!("{}: min h {:.4} at iteration {}", problem.barriers()[w.barrier].label(), w.min_h, w.iteration);
    }
    Ok(())
}
