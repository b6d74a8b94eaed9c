//! Monte Carlo safety estimate for the pendulum: zero value gradient with
//! and without the barrier filter, then random value gradients of growing
//! size. Large nominal controls overshoot within one Euler step even when
//! the filter is on.

use safe_fbsde::config::{RunConfig, Task};
use safe_fbsde::verifier::{monte_carlo_safety, Controller, NominalGradient};

fn main() -> safe_fbsde::Result<()> {
    let problem = RunConfig::preset(Task::PendulumBalance).problem()?;
    let runs = [
        ("filtered, zero", Controller::filtered(NominalGradient::Zero)),
        ("unfiltered, zero", Controller::unfiltered(NominalGradient::Zero)),
        ("filtered, random 1", Controller::filtered(NominalGradient::Random { scale: 1.0 })),
        ("unfiltered, random 1", Controller::unfiltered(NominalGradient::Random { scale: 1.0 })),
        ("filtered, random 5", Controller::filtered(NominalGradient::Random { scale: 5.0 })),
    ];
    for (name, c) in runs {
        let r = monte_carlo_safety(&c, &problem, 2000, 0.0, 0)?;
        println!(
            "{name:<20} violations {:>5} / {}  min h {:>8.4}",
            r.violation_count,
            r.num_rollouts,
            r.min_h_overall.unwrap_or(f64::NAN)
        );
    }
    println!("note: {}", safe_fbsde::verifier::DISCRETIZATION_CAVEAT);
    Ok(())
}
