//! Command-line front end: `train`, `evaluate`, `verify`, `gradcheck` and
//! `qp-fuzz`.
//!
//! Exit codes: 0 success, 1 error, 2 usage, 3 safety violation,
//! 4 infeasible QP, 5 failed numerical check.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::network::NetworkParams;
use crate::qp::qp_fuzz;
use crate::trainer::{self, ControlProblem, Trajectory};
use crate::verifier::{monte_carlo_safety, simulate, Controller, NominalGradient};

pub const EXIT_ERROR: i32 = 1;
pub const EXIT_SAFETY: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;
pub const EXIT_CHECK_FAILED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "safe-fbsde", version, about = "Safe deep FBSDE controllers with a differentiable CBF-QP layer")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Built-in task preset.
    #[arg(long, global = true)]
    pub task: Option<Task>,
    /// JSON run configuration; takes precedence over --task.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Batch size (training) or number of rollouts per gradient check.
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Single worker thread; artifacts are bit-identical across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NominalKind {
    Zero,
    Random,
    Network,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a controller and write its parameters, log and worst cases.
    Train,
    /// Roll out trained parameters on fresh noise.
    Evaluate {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Monte Carlo safety check.
    Verify {
        #[arg(long, default_value_t = 10_000)]
        rollouts: usize,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long, value_enum, default_value_t = NominalKind::Zero)]
        controller: NominalKind,
        /// Parameters for `--controller network`.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Standard deviation of the random value gradient.
        #[arg(long, default_value_t = 5.0)]
        random_scale: f64,
        /// Apply `−R⁻¹GᵀV_x` directly, bypassing the QP.
        #[arg(long)]
        unfiltered: bool,
    },
    /// Compare the training-loss gradient with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-6)]
        floor: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Compare the interior-point QP solver against active-set enumeration.
    QpFuzz {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
}

/// Config from `--config` or `--task` with the command-line overrides applied.
pub fn resolve_config(common: &CommonArgs, default_task: Option<Task>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, common.task.or(default_task)) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(task)) => RunConfig::preset(task),
        (None, None) => return Err(Error::Config("either --task or --config is required".into())),
    };
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(k) = common.iterations {
        cfg.train.iterations = k;
    }
    if let Some(m) = common.batch {
        cfg.train.batch_size = m;
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::SafetyViolation { .. } => EXIT_SAFETY,
        Error::InfeasibleProblem { .. } | Error::RolloutInfeasible { .. } => EXIT_INFEASIBLE,
        _ => EXIT_ERROR,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn fmt_row(out: &mut String, vals: impl IntoIterator<Item = String>) {
    let row: Vec<String> = vals.into_iter().collect();
    out.push_str(&row.join(","));
    out.push('\n');
}

fn trajectory_header(problem: &ControlProblem, leading: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = leading.iter().map(|s| s.to_string()).collect();
    h.push("t".into());
    h.extend(problem.system.state_labels());
    h.extend(problem.system.control_labels());
    h.push("V".into());
    h.extend(problem.barriers().iter().map(|b| format!("h_{}", b.label())));
    h
}

fn trajectory_rows(out: &mut String, problem: &ControlProblem, t: &Trajectory, leading: &[String]) {
    let n_u = problem.system.n_u();
    for (k, x) in t.states.iter().enumerate() {
        let mut row: Vec<String> = leading.to_vec();
        row.push(format!("{}", k as f64 * problem.dt));
        row.extend(x.iter().map(|v| v.to_string()));
        match t.controls.get(k) {
            Some(u) => row.extend(u.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), n_u)),
        }
        row.push(t.values.get(k).map(|v| v.to_string()).unwrap_or_default());
        row.extend(t.barrier_values[k].iter().map(|v| v.to_string()));
        fmt_row(out, row);
    }
}

/// One row per time step: `t, states…, controls…, V, h per barrier`.
/// Controls are empty on the terminal row; `V` is empty when not propagated.
pub fn trajectory_csv(problem: &ControlProblem, t: &Trajectory) -> String {
    let mut out = String::new();
    fmt_row(&mut out, trajectory_header(problem, &[]));
    trajectory_rows(&mut out, problem, t, &[]);
    out
}

fn mean_csv(problem: &ControlProblem, ev: &trainer::Evaluation) -> String {
    let labels = problem.system.state_labels();
    let mut out = String::new();
    let mut header = vec!["t".to_string()];
    header.extend(labels.iter().map(|l| format!("mean_{l}")));
    header.extend(labels.iter().map(|l| format!("std_{l}")));
    fmt_row(&mut out, header);
    for (k, (m, s)) in ev.mean_states.iter().zip(&ev.std_states).enumerate() {
        let mut row = vec![format!("{}", k as f64 * problem.dt)];
        row.extend(m.iter().chain(s).map(|v| v.to_string()));
        fmt_row(&mut out, row);
    }
    out
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    task: Task,
    seed: u64,
    iterations: usize,
    final_loss: Option<&'a trainer::LossBreakdown>,
    min_h: Vec<f64>,
    worst_cases: Vec<WorstCaseSummary>,
}

#[derive(Serialize)]
struct WorstCaseSummary {
    barrier: String,
    iteration: usize,
    element: usize,
    min_h: f64,
    file: String,
}

fn cmd_train(common: &CommonArgs) -> Result<i32> {
    let cfg = resolve_config(common, None)?;
    let problem = cfg.problem()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), &cfg)?;
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join("train_log.jsonl"))?);
    let mut log_err: Option<std::io::Error> = None;
    let result = trainer::train(&problem, &cfg.train, |entry| {
        let line = serde_json::to_string(entry).expect("log entry serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        if entry.iteration % 10 == 0 || entry.iteration + 1 == cfg.train.iterations {
            eprintln!(
                "iter {:>5}  loss {:>12.6}  min_h {:?}  qp iters {:.2}/{}",
                entry.iteration, entry.loss.total, entry.min_h, entry.qp.mean_iterations, entry.qp.max_iterations
            );
        }
    });
    drop(log);
    if let Some(e) = log_err {
        return Err(e.into());
    }
    let out = result?;
    out.params.save(&dir.join("params.json"))?;
    let mut worst = Vec::new();
    for w in &out.worst_cases {
        let label = problem.barriers()[w.barrier].label();
        let file = format!("worst_case_{label}.csv");
        fs::write(dir.join(&file), trajectory_csv(&problem, &w.trajectory))?;
        worst.push(WorstCaseSummary { barrier: label, iteration: w.iteration, element: w.element, min_h: w.min_h, file });
    }
    let min_h = (0..problem.barriers().len())
        .map(|b| out.log.iter().map(|l| l.min_h[b]).fold(f64::INFINITY, f64::min))
        .collect();
    let summary = TrainSummary {
        task: cfg.task,
        seed: cfg.train.seed,
        iterations: out.log.len(),
        final_loss: out.log.last().map(|l| &l.loss),
        min_h,
        worst_cases: worst,
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(0)
}

fn cmd_evaluate(common: &CommonArgs, params: &Path, rollouts: Option<usize>) -> Result<i32> {
    let cfg = resolve_config(common, None)?;
    let problem = cfg.problem()?;
    let net = NetworkParams::load(params)?;
    let n = rollouts.unwrap_or(cfg.eval_rollouts);
    let ev = trainer::evaluate(&net, &problem, n, cfg.train.seed)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("eval_stats.json"), &ev.stats)?;
    fs::write(dir.join("eval_mean.csv"), mean_csv(&problem, &ev))?;
    let mut all = String::new();
    fmt_row(&mut all, trajectory_header(&problem, &["rollout"]));
    for (i, t) in ev.record.trajectories.iter().enumerate() {
        trajectory_rows(&mut all, &problem, t, &[i.to_string()]);
    }
    fs::write(dir.join("eval_trajectories.csv"), all)?;
    println!("{}", serde_json::to_string_pretty(&ev.stats)?);
    Ok(if ev.stats.violations > 0 { EXIT_SAFETY } else { 0 })
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    common: &CommonArgs,
    rollouts: usize,
    epsilon: f64,
    kind: NominalKind,
    params: Option<&Path>,
    random_scale: f64,
    unfiltered: bool,
) -> Result<i32> {
    let cfg = resolve_config(common, None)?;
    let problem = cfg.problem()?;
    let net = match (kind, params) {
        (NominalKind::Network, Some(p)) => Some(NetworkParams::load(p)?),
        (NominalKind::Network, None) => return Err(Error::Config("--controller network needs --params".into())),
        _ => None,
    };
    let nominal = match kind {
        NominalKind::Zero => NominalGradient::Zero,
        NominalKind::Random => NominalGradient::Random { scale: random_scale },
        NominalKind::Network => NominalGradient::Network(net.as_ref().expect("loaded above")),
    };
    let controller = Controller { nominal, filtered: !unfiltered };
    let seed = cfg.train.seed;
    let report = monte_carlo_safety(&controller, &problem, rollouts, epsilon, seed)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    write_json(&dir.join("verify_report.json"), &report)?;
    if let Some(i) = report.worst_trajectory_index {
        let worst = simulate(&controller, &problem, seed, i)?;
        fs::write(dir.join("verify_worst_case.csv"), trajectory_csv(&problem, &worst.trajectory))?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    let failed = report.violation_count > 0 || report.infeasible_count > 0;
    Ok(if failed && controller.filtered { EXIT_SAFETY } else { 0 })
}

fn cmd_gradcheck(common: &CommonArgs, steps: usize, epsilon: f64, floor: f64, tolerance: f64) -> Result<i32> {
    let mut cfg = resolve_config(common, Some(Task::PendulumBalance))?;
    cfg.train.horizon_steps = steps;
    if common.batch.is_none() {
        cfg.train.batch_size = 2;
    }
    let problem = cfg.problem()?;
    let params = trainer::initial_params(&problem, &cfg.train)?;
    let check = trainer::gradient_check(&params, &problem, &cfg.train, epsilon, floor)?;
    let mut text = String::new();
    for (name, e) in &check.report.per_tensor {
        let _ = writeln!(text, "{name:>12}  max rel err {e:.3e}");
    }
    eprint!("{text}");
    println!("{}", serde_json::to_string_pretty(&check)?);
    Ok(if check.report.max_rel_err <= tolerance { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_qp_fuzz(common: &CommonArgs, instances: usize, tolerance: f64) -> Result<i32> {
    let settings = match (&common.config, common.task) {
        (None, None) => Default::default(),
        _ => resolve_config(common, None)?.qp,
    };
    let report = qp_fuzz(instances, common.seed.unwrap_or(0), tolerance, &settings);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(if report.mismatches == 0 { 0 } else { EXIT_CHECK_FAILED })
}

/// Runs one parsed command line; returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let c = &cli.common;
    match &cli.command {
        Command::Train => cmd_train(c),
        Command::Evaluate { params, rollouts } => cmd_evaluate(c, params, *rollouts),
        Command::Verify { rollouts, epsilon, controller, params, random_scale, unfiltered } => {
            cmd_verify(c, *rollouts, *epsilon, *controller, params.as_deref(), *random_scale, *unfiltered)
        }
        Command::Gradcheck { steps, epsilon, floor, tolerance } => cmd_gradcheck(c, *steps, *epsilon, *floor, *tolerance),
        Command::QpFuzz { instances, tolerance } => cmd_qp_fuzz(c, *instances, *tolerance),
    }
}

/// Thread cap: one worker under `--deterministic`, otherwise the
/// `SAFE_FBSDE_THREADS` environment variable if set.
pub fn thread_cap(common: &CommonArgs) -> Result<Option<usize>> {
    if common.deterministic {
        Ok(Some(1))
    } else {
        crate::parallel::threads_from_env()
    }
}

/// Entry point shared by the binary: parse, run, map errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = thread_cap(&cli.common).and_then(|t| crate::parallel::with_threads(t, || run(&cli))).and_then(|r| r);
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
