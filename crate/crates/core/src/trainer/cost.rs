use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Quadratic running and terminal costs about a goal state, with optional
/// angle wrapping on selected coordinates.
///
/// `q(x) = eᵀ diag(q_running) e`, `φ(x) = eᵀ diag(q_terminal) e`,
/// `R = diag(r)`, where `e = x − x_goal` with wrapped angle entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub x_goal: Vec<f64>,
    pub q_running: Vec<f64>,
    pub q_terminal: Vec<f64>,
    pub r: Vec<f64>,
    /// Coordinates whose error is wrapped into `[−π, π)`.
    #[serde(default)]
    pub angle_indices: Vec<usize>,
}

/// Wraps an angle error into `[−π, π)`. The wrap offset is piecewise
/// constant, so the derivative is 1 almost everywhere.
fn wrap<S: Scalar>(e: S) -> S {
    let k = ((e.value() + PI) / (2.0 * PI)).floor();
    e - S::cst(2.0 * PI * k)
}

impl CostSpec {
    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        if self.x_goal.len() != n_x || self.q_running.len() != n_x || self.q_terminal.len() != n_x {
            return Err(Error::Config(format!("cost vectors must have length n_x = {n_x}")));
        }
        if self.r.len() != n_u {
            return Err(Error::Config(format!("control weights must have length n_u = {n_u}")));
        }
        if self.q_running.iter().chain(&self.q_terminal).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("state cost weights must be finite and >= 0".into()));
        }
        if self.r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("control cost weights must be > 0".into()));
        }
        if self.angle_indices.iter().any(|&i| i >= n_x) {
            return Err(Error::Config("angle index out of range".into()));
        }
        Ok(())
    }

    pub fn error<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        x.iter()
            .zip(&self.x_goal)
            .enumerate()
            .map(|(i, (&xi, &g))| {
                let e = xi - S::cst(g);
                if self.angle_indices.contains(&i) { wrap(e) } else { e }
            })
            .collect()
    }

    pub fn running<S: Scalar>(&self, x: &[S]) -> S {
        let e = self.error(x);
        let mut acc = S::zero();
        for (ei, w) in e.iter().zip(&self.q_running) {
            acc += ei.sq().scale(*w);
        }
        acc
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        self.error(x).iter().zip(&self.q_terminal).map(|(e, w)| w * e * e).sum()
    }

    pub fn terminal_grad(&self, x: &[f64]) -> Vec<f64> {
        self.error(x).iter().zip(&self.q_terminal).map(|(e, w)| 2.0 * w * e).collect()
    }

    /// Diagonal of `∂φ_x/∂x`.
    pub fn terminal_hessian_diag(&self) -> Vec<f64> {
        self.q_terminal.iter().map(|w| 2.0 * w).collect()
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.r))
    }

    pub fn control_cost(&self, u: &[f64]) -> f64 {
        0.5 * u.iter().zip(&self.r).map(|(ui, r)| r * ui * ui).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> CostSpec {
        CostSpec {
            x_goal: vec![PI, 0.0],
            q_running: vec![2.0, 0.5],
            q_terminal: vec![10.0, 1.0],
            r: vec![0.1],
            angle_indices: vec![0],
        }
    }

    #[test]
    fn terminal_grad_matches_fd() {
        let c = spec();
        for x in [[2.5, 0.3], [3.9, -1.2], [0.1, 2.0], [-2.0, 0.0]] {
            let g = c.terminal_grad(&x);
            for i in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (c.terminal(&xp) - c.terminal(&xm)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + g[i].abs()), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn wrapping() {
        let c = spec();
        // θ = −π + 0.1 is 0.1 rad from π after wrapping
        let e = c.error(&[-PI + 0.1, 0.0]);
        assert!((e[0] - 0.1).abs() < 1e-12);
        assert_eq!(c.running(&[PI, 0.0]), 0.0);
        assert!(c.validate(2, 1).is_ok());
        assert!(c.validate(3, 1).is_err());
    }
}
