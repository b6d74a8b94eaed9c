//! Central-difference check of the full training-loss gradient on a short
//! pendulum horizon.

use safe_fbsde::config::{RunConfig, Task};
use safe_fbsde::trainer;

fn main() -> safe_fbsde::Result<()> {
    let mut cfg = RunConfig::preset(Task::PendulumBalance);
    cfg.train.horizon_steps = 5;
    cfg.train.batch_size = 2;
    let problem = cfg.problem()?;
    let params = trainer::initial_params(&problem, &cfg.train)?;
    let gc = trainer::gradient_check(&params, &problem, &cfg.train, 1e-4, 1e-6)?;
    for (name, err) in &gc.report.per_tensor {
        println!("{name:>12}  {err:.2e}");
    }
    println!("max rel err {:.2e} over {} parameters", gc.report.max_rel_err, gc.report.checked);
    Ok(())
}
