use serde::{Deserialize, Serialize};

use crate::diff_engine::TerminalSeed;
use crate::network::NetworkParams;

use super::cost::CostSpec;
use super::rollout::{RolloutRecord, Trajectory};

/// Weights of the four terminal loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Propagated vs true terminal value.
    pub a: f64,
    /// Predicted vs true terminal value gradient.
    pub b: f64,
    /// Magnitude of the true terminal value.
    pub c: f64,
    /// Magnitude of the true terminal value gradient.
    pub d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, c: 0.01, d: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub value_term: f64,
    pub gradient_term: f64,
    pub terminal_value_term: f64,
    pub terminal_gradient_term: f64,
    pub weight_decay_term: f64,
    pub total: f64,
}

fn element_terms(t: &Trajectory, cost: &CostSpec) -> [f64; 4] {
    let xn = t.terminal_state();
    let target_v = cost.terminal(xn);
    let target_vx = cost.terminal_grad(xn);
    let v_n = *t.values.last().unwrap();
    let vx_n = t.value_grads.last().unwrap();
    let gap: f64 = target_vx.iter().zip(vx_n).map(|(a, b)| (a - b).powi(2)).sum();
    [(target_v - v_n).powi(2), gap, target_v * target_v, target_vx.iter().map(|v| v * v).sum()]
}

/// Mini-batch loss: batch means of the four terminal terms plus
/// `weight_decay·‖θ‖²` over LSTM and linear parameters.
pub fn compute_loss(
    record: &RolloutRecord,
    cost: &CostSpec,
    weights: &LossWeights,
    weight_decay: f64,
    params: &NetworkParams,
) -> LossBreakdown {
    let m = record.batch_size().max(1) as f64;
    let mut sums = [0.0; 4];
    for t in &record.trajectories {
        for (s, v) in sums.iter_mut().zip(element_terms(t, cost)) {
            *s += v;
        }
    }
    let [t1, t2, t3, t4] = sums.map(|s| s / m);
    let t5 = params.decay_norm_sq();
    LossBreakdown {
        value_term: t1,
        gradient_term: t2,
        terminal_value_term: t3,
        terminal_gradient_term: t4,
        weight_decay_term: t5,
        total: weights.a * t1 + weights.b * t2 + weights.c * t3 + weights.d * t4 + weight_decay * t5,
    }
}

/// Gradient of `scale·(a·t₁ + b·t₂ + c·t₃ + d·t₄)` for one element w.r.t.
/// its terminal value, terminal state and terminal gradient prediction.
/// Targets are not detached: they depend on the terminal state.
pub fn terminal_seed(t: &Trajectory, cost: &CostSpec, w: &LossWeights, scale: f64) -> TerminalSeed {
    let xn = t.terminal_state();
    let phi = cost.terminal(xn);
    let phi_x = cost.terminal_grad(xn);
    let phi_xx = cost.terminal_hessian_diag();
    let v_n = *t.values.last().unwrap();
    let vx_n = t.value_grads.last().unwrap();

    let dv = -2.0 * w.a * (phi - v_n) * scale;
    let dphi = (2.0 * w.a * (phi - v_n) + 2.0 * w.c * phi) * scale;
    let dphi_x: Vec<f64> = phi_x
        .iter()
        .zip(vx_n)
        .map(|(p, v)| (2.0 * w.b * (p - v) + 2.0 * w.d * p) * scale)
        .collect();
    let dvx = phi_x.iter().zip(vx_n).map(|(p, v)| -2.0 * w.b * (p - v) * scale).collect();
    let dx = (0..xn.len()).map(|i| dphi * phi_x[i] + dphi_x[i] * phi_xx[i]).collect();
    TerminalSeed { dv, dx, dvx }
}
