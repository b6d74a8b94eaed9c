use proptest::prelude::*;
use safe_fbsde::config::{RunConfig, Task};
use safe_fbsde::dynamics::euler_maruyama_step;
use safe_fbsde::network::NetworkParams;
use safe_fbsde::parallel::with_threads;
use safe_fbsde::trainer::*;

fn small(task: Task, steps: usize, batch: usize) -> (ControlProblem, TrainConfig) {
    let mut cfg = RunConfig::preset(task);
    cfg.train.horizon_steps = steps;
    cfg.train.batch_size = batch;
    cfg.train.iterations = 2;
    (cfg.problem().unwrap(), cfg.train)
}

fn params_for(problem: &ControlProblem, cfg: &TrainConfig, seed: u64) -> NetworkParams {
    initial_params(problem, &TrainConfig { seed, ..cfg.clone() }).unwrap()
}

#[test]
fn value_and_state_share_each_noise_increment() {
    for task in [Task::PendulumBalance, Task::CartpoleSwingup, Task::CarObstacles] {
        let (problem, cfg) = small(task, 20, 3);
        let params = params_for(&problem, &cfg, 1);
        let (record, _) = rollout_batch(&params, &problem, 3, 9, 0, false, false).unwrap();
        let sys = &problem.system;
        let (n_x, n_w) = (sys.n_x(), sys.n_w());
        for t in &record.trajectories {
            assert_eq!(t.values[0], params.psi());
            for k in 0..t.horizon() {
                let x = &t.states[k];
                let next = euler_maruyama_step(sys, x, &t.controls[k], problem.dt, &t.noises[k]).unwrap();
                assert_eq!(next, t.states[k + 1]);
                let sigma = sys.diffusion(x.as_slice());
                let mut vsdw = 0.0;
                for i in 0..n_x {
                    for j in 0..n_w {
                        vsdw += t.value_grads[k][i] * sigma[i * n_w + j] * t.noises[k][j];
                    }
                }
                let run = problem.cost.running(x.as_slice()) + problem.cost.control_cost(&t.controls[k]);
                let expect = t.values[k] - run * problem.dt + vsdw;
                assert!((t.values[k + 1] - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "{task} step {k}");
            }
        }
    }
}

#[test]
fn filtered_controls_satisfy_barrier_rows() {
    let (problem, cfg) = small(Task::CarMulti, 15, 2);
    let params = params_for(&problem, &cfg, 2);
    let (record, _) = rollout_batch(&params, &problem, 2, 0, 0, false, false).unwrap();
    for t in &record.trajectories {
        for (x, u) in t.states.iter().zip(&t.controls) {
            for row in problem.constraint_rows(x) {
                let cu: f64 = row.c_row.iter().zip(u).map(|(a, b)| a * b).sum();
                assert!(cu <= row.d + 1e-7 * (1.0 + row.d.abs()), "{cu} > {}", row.d);
            }
        }
    }
}

#[test]
fn batch_gradient_is_independent_of_thread_count() {
    let (problem, cfg) = small(Task::PendulumBalance, 10, 6);
    let params = params_for(&problem, &cfg, 3);
    let one = with_threads(Some(1), || batch_gradient(&params, &problem, &cfg, 4).unwrap()).unwrap();
    let three = with_threads(Some(3), || batch_gradient(&params, &problem, &cfg, 4).unwrap()).unwrap();
    assert_eq!(one.grad.data, three.grad.data);
    assert_eq!(one.loss, three.loss);
    assert_eq!(one.record, three.record);
}

#[test]
fn training_and_evaluation_noise_differ() {
    let (problem, cfg) = small(Task::PendulumBalance, 5, 2);
    let params = params_for(&problem, &cfg, 0);
    let (a, _) = rollout_batch(&params, &problem, 2, 0, 0, false, false).unwrap();
    let (b, _) = rollout_batch(&params, &problem, 2, 0, 0, true, false).unwrap();
    let (c, _) = rollout_batch(&params, &problem, 2, 0, 1, false, false).unwrap();
    assert_ne!(a.trajectories[0].noises, b.trajectories[0].noises);
    assert_ne!(a.trajectories[0].noises, c.trajectories[0].noises);
    assert_ne!(a.trajectories[0].noises, a.trajectories[1].noises);
}

#[test]
fn short_training_run_logs_every_iteration() {
    let (problem, mut cfg) = small(Task::PendulumBalance, 10, 4);
    cfg.iterations = 3;
    let mut seen = Vec::new();
    let out = train(&problem, &cfg, |l| seen.push(l.iteration)).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(out.log.len(), 3);
    assert_eq!(out.worst_cases.len(), 1);
    assert!(out.log.iter().all(|l| l.loss.total.is_finite() && l.min_h[0] >= 0.0));
    assert!(out.params.data.iter().all(|v| v.is_finite()));
}

#[test]
fn archive_round_trip() {
    let (problem, cfg) = small(Task::CartpoleSwingup, 5, 1);
    let params = params_for(&problem, &cfg, 8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    params.save(&path).unwrap();
    assert!(dir.path().join("p.bin").exists());
    assert_eq!(NetworkParams::load(&path).unwrap(), params);
    std::fs::write(dir.path().join("p.bin"), [0u8; 7]).unwrap();
    assert!(NetworkParams::load(&path).is_err());
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = vec![1.0, -2.0, 0.5];
    let g = [0.3, -4.0, 1e-3];
    let mut st = AdamState::new(3);
    adam_step(&mut p, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
    for (new, (old, gi)) in p.iter().zip([1.0, -2.0, 0.5].iter().zip(g)) {
        assert!((old - new - 0.01 * gi.signum()).abs() < 1e-4);
    }
    assert!(adam_step(&mut p, &[f64::NAN, 0.0, 0.0], &mut st, 0.01, &AdamConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn loss_terms_are_non_negative(seed in any::<u64>(), psi in -50.0f64..50.0) {
        let (problem, cfg) = small(Task::PendulumBalance, 6, 2);
        let mut params = params_for(&problem, &cfg, seed);
        params.set_psi(psi);
        let (record, _) = rollout_batch(&params, &problem, 2, seed, 0, false, false).unwrap();
        let l = compute_loss(&record, &problem.cost, &cfg.loss_weights, cfg.weight_decay, &params);
        for v in [l.value_term, l.gradient_term, l.terminal_value_term, l.terminal_gradient_term, l.weight_decay_term] {
            prop_assert!(v >= 0.0);
        }
        let w = cfg.loss_weights;
        let sum = w.a * l.value_term + w.b * l.gradient_term + w.c * l.terminal_value_term
            + w.d * l.terminal_gradient_term + cfg.weight_decay * l.weight_decay_term;
        prop_assert!((sum - l.total).abs() <= 1e-12 * (1.0 + sum));
    }

    #[test]
    fn adam_is_deterministic_and_finite(g in prop::collection::vec(-1e3f64..1e3, 1..20), steps in 1usize..10) {
        let run = || {
            let mut p = vec![0.0; g.len()];
            let mut st = AdamState::new(g.len());
            for _ in 0..steps {
                adam_step(&mut p, &g, &mut st, 1e-2, &AdamConfig::default()).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().zip(&g).all(|(p, gi)| p.abs() <= 1e-2 * steps as f64 + 1e-12 && (*gi == 0.0 || p * gi <= 0.0)));
    }
}
