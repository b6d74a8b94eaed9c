//! Run configuration and the built-in task presets.
//!
//! A [`RunConfig`] is plain JSON. Every preset is also shipped as a file
//! under `presets/` at the repository root; `RunConfig::preset` and those
//! files are kept identical by a test.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::barrier::{
    all_car_pairs, car_obstacle_barrier, cartpole_angle_barrier, cartpole_position_barrier, pendulum_box_barrier,
    BarrierSpec,
};
use crate::dynamics::{Car2dParams, CartPoleParams, PendulumParams, SystemParams};
use crate::error::{Error, Result};
use crate::qp::QpSettings;
use crate::trainer::{ControlProblem, CostSpec, LossWeights, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    PendulumBalance,
    CartpoleSwingup,
    #[serde(rename = "cartpole-balance-1c")]
    CartpoleBalance1c,
    #[serde(rename = "cartpole-balance-2c")]
    CartpoleBalance2c,
    CarObstacles,
    CarMulti,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::PendulumBalance,
        Task::CartpoleSwingup,
        Task::CartpoleBalance1c,
        Task::CartpoleBalance2c,
        Task::CarObstacles,
        Task::CarMulti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::PendulumBalance => "pendulum-balance",
            Task::CartpoleSwingup => "cartpole-swingup",
            Task::CartpoleBalance1c => "cartpole-balance-1c",
            Task::CartpoleBalance2c => "cartpole-balance-2c",
            Task::CarObstacles => "car-obstacles",
            Task::CarMulti => "car-multi",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub system: SystemParams,
    pub barriers: Vec<BarrierSpec>,
    pub cost: CostSpec,
    pub x0: Vec<f64>,
    pub train: TrainConfig,
    #[serde(default)]
    pub qp: QpSettings,
    /// Number of rollouts for `evaluate`.
    #[serde(default = "default_eval_rollouts")]
    pub eval_rollouts: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_eval_rollouts() -> usize {
    128
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

const DT: f64 = 0.02;

fn train_cfg(batch_size: usize, iterations: usize, horizon_steps: usize, learning_rate: f64) -> TrainConfig {
    TrainConfig {
        batch_size,
        iterations,
        horizon_steps,
        dt: DT,
        loss_weights: LossWeights::default(),
        weight_decay: 1e-5,
        learning_rate,
        seed: 0,
        ..TrainConfig::default()
    }
}

fn car_cost(num_cars: usize, goals: &[[f64; 2]]) -> CostSpec {
    let mut x_goal = Vec::with_capacity(4 * num_cars);
    for g in goals {
        x_goal.extend([g[0], g[1], 0.0, 0.0]);
    }
    CostSpec {
        x_goal,
        q_running: [0.2, 0.2, 0.0, 0.01].repeat(num_cars),
        q_terminal: [2.0, 2.0, 0.0, 0.1].repeat(num_cars),
        r: [0.05, 0.05].repeat(num_cars),
        angle_indices: vec![],
    }
}

impl RunConfig {
    /// Built-in preset with the published hyperparameters and tuned costs.
    pub fn preset(task: Task) -> Self {
        let base = |system, barriers, cost, x0, train| RunConfig {
            task,
            system,
            barriers,
            cost,
            x0,
            train,
            qp: QpSettings::default(),
            eval_rollouts: 128,
            output_dir: PathBuf::from("runs").join(task.name()),
        };
        let cartpole = SystemParams::CartPole(CartPoleParams::default());
        let balance_cost = CostSpec {
            x_goal: vec![0.0, PI, 0.0, 0.0],
            q_running: vec![0.1, 10.0, 0.1, 0.5],
            q_terminal: vec![1.0, 50.0, 1.0, 2.0],
            r: vec![1.0],
            angle_indices: vec![1],
        };
        match task {
            Task::PendulumBalance => base(
                SystemParams::Pendulum(PendulumParams::default()),
                vec![pendulum_box_barrier(2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.05, 0.5).unwrap()],
                CostSpec {
                    x_goal: vec![PI, 0.0],
                    q_running: vec![10.0, 0.1],
                    q_terminal: vec![20.0, 1.0],
                    r: vec![0.1],
                    angle_indices: vec![0],
                },
                vec![PI, 0.0],
                train_cfg(128, 201, 75, 1e-2),
            ),
            Task::CartpoleSwingup => base(
                cartpole,
                vec![cartpole_position_barrier(-5.0, 5.0, 0.1, 1.0).unwrap()],
                CostSpec {
                    x_goal: vec![0.0, PI, 0.0, 0.0],
                    q_running: vec![0.1, 5.0, 0.1, 0.1],
                    q_terminal: vec![1.0, 50.0, 1.0, 2.0],
                    r: vec![0.05],
                    angle_indices: vec![],
                },
                vec![0.0, 0.0, 0.0, 0.0],
                train_cfg(128, 2001, 75, 1e-2),
            ),
            Task::CartpoleBalance1c => base(
                cartpole,
                vec![cartpole_angle_barrier(PI / 2.0, 3.0 * PI / 2.0, 0.1, 1.0).unwrap()],
                balance_cost,
                vec![0.0, PI, 0.0, 0.0],
                train_cfg(128, 201, 75, 1e-2),
            ),
            Task::CartpoleBalance2c => base(
                cartpole,
                vec![
                    cartpole_position_barrier(-10.0, 10.0, 0.01, 10.0).unwrap(),
                    cartpole_angle_barrier(PI / 2.0, 3.0 * PI / 2.0, 10.0, 100.0).unwrap(),
                ],
                balance_cost,
                vec![0.0, PI, 0.0, 0.0],
                train_cfg(128, 201, 75, 1e-2),
            ),
            Task::CarObstacles => base(
                SystemParams::Car2d(Car2dParams { num_cars: 1, sigma: 0.1 }),
                [(1.0, 1.0), (1.0, 0.0), (0.0, 2.0)]
                    .into_iter()
                    .map(|(x, y)| car_obstacle_barrier(x, y, 0.3, 0.05, 1.0).unwrap())
                    .collect(),
                car_cost(1, &[[2.0, 2.0]]),
                vec![0.0, 0.0, 0.0, 0.0],
                train_cfg(128, 1000, 150, 5e-3),
            ),
            Task::CarMulti => base(
                SystemParams::Car2d(Car2dParams { num_cars: 4, sigma: 0.1 }),
                all_car_pairs(4, 0.05, 0.1, 1.0).unwrap(),
                car_cost(4, &[[2.0, 2.0], [0.0, 2.0], [2.0, 0.0], [0.0, 0.0]]),
                vec![
                    0.0, 0.0, PI / 4.0, 0.1, //
                    2.0, 0.0, 3.0 * PI / 4.0, 0.1, //
                    0.0, 2.0, -PI / 4.0, 0.1, //
                    2.0, 2.0, -3.0 * PI / 4.0, 0.1,
                ],
                train_cfg(256, 1000, 150, 5e-3),
            ),
        }
    }

    /// Parses JSON; errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.problem().map(|_| ())
    }

    /// The control problem this config describes.
    pub fn problem(&self) -> Result<ControlProblem> {
        let system = self.system.build()?;
        ControlProblem::new(
            system,
            self.barriers.clone(),
            self.cost.clone(),
            self.x0.clone(),
            self.train.dt,
            self.train.horizon_steps,
            self.qp,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for task in Task::ALL {
            let cfg = RunConfig::preset(task);
            cfg.validate().unwrap();
            let problem = cfg.problem().unwrap();
            problem.check_start().unwrap();
            let back = RunConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg, "{task}");
            assert_eq!(task.name().parse::<Task>().unwrap(), task);
        }
    }

    #[test]
    fn published_hyperparameters() {
        let p = RunConfig::preset(Task::PendulumBalance);
        assert_eq!((p.train.batch_size, p.train.iterations, p.train.horizon_steps), (128, 201, 75));
        assert_eq!(p.train.learning_rate, 1e-2);
        assert_eq!((p.barriers[0].mu, p.barriers[0].gamma), (0.05, 0.5));
        assert_eq!(RunConfig::preset(Task::CartpoleSwingup).train.iterations, 2001);
        let multi = RunConfig::preset(Task::CarMulti);
        assert_eq!(multi.train.batch_size, 256);
        assert_eq!(multi.barriers.len(), 6);
        let problem = multi.problem().unwrap();
        assert_eq!((problem.system.n_x(), problem.system.n_u()), (16, 8));
        let obs = RunConfig::preset(Task::CarObstacles);
        assert_eq!((obs.train.iterations, obs.train.learning_rate), (1000, 5e-3));
    }

    #[test]
    fn parse_errors_report_position() {
        let err = RunConfig::from_json("{\n  \"task\": \"pendulum-balance\",\n  oops\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(RunConfig::load(Path::new("/nonexistent/config.json")).is_err());
    }
}
