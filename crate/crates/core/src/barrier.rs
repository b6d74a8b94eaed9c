//! Zeroing control barrier functions of the form
//! `h(x) = (position constraint) − μ·(velocity)²` and the linear QP row each
//! one induces on the control.

use serde::{Deserialize, Serialize};

use crate::dynamics::SystemModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BarrierKind {
    /// `(θ_h − θ)(θ − θ_l) − μθ̇²` on the pendulum state `[θ, θ̇]`.
    PendulumBox { theta_l: f64, theta_h: f64 },
    /// `(x_h − x_c)(x_c − x_l) − μẋ_c²` on the cart-pole state.
    CartPosition { x_l: f64, x_h: f64 },
    /// `(θ_h − θ)(θ − θ_l) − μθ̇²` on the cart-pole state.
    CartPoleAngle { theta_l: f64, theta_h: f64 },
    /// Circular obstacle around car `car` (zero-based).
    CarObstacle { car: usize, o_x: f64, o_y: f64, o_r: f64 },
    /// Pairwise separation between cars `i` and `j`, each of radius `car_radius`.
    CarPair { i: usize, j: usize, car_radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    #[serde(flatten)]
    pub kind: BarrierKind,
    /// Velocity penalty.
    pub mu: f64,
    /// Slope of the linear class-K function `α(h) = γh`.
    pub gamma: f64,
}

/// One CBF inequality `c_row·u ≤ d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub c_row: Vec<f64>,
    pub d: f64,
}

fn check_common(mu: f64, gamma: f64) -> Result<()> {
    if !(mu.is_finite() && mu >= 0.0) {
        return Err(Error::InvalidParameter(format!("mu must be >= 0, got {mu}")));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(())
}

fn check_bounds(lo: f64, hi: f64) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && hi > lo {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("upper bound {hi} must exceed lower bound {lo}")))
    }
}

pub fn pendulum_box_barrier(theta_l: f64, theta_h: f64, mu: f64, gamma: f64) -> Result<BarrierSpec> {
    check_bounds(theta_l, theta_h)?;
    check_common(mu, gamma)?;
    Ok(BarrierSpec { kind: BarrierKind::PendulumBox { theta_l, theta_h }, mu, gamma })
}

pub fn cartpole_position_barrier(x_l: f64, x_h: f64, mu: f64, gamma: f64) -> Result<BarrierSpec> {
    check_bounds(x_l, x_h)?;
    check_common(mu, gamma)?;
    Ok(BarrierSpec { kind: BarrierKind::CartPosition { x_l, x_h }, mu, gamma })
}

pub fn cartpole_angle_barrier(theta_l: f64, theta_h: f64, mu: f64, gamma: f64) -> Result<BarrierSpec> {
    check_bounds(theta_l, theta_h)?;
    check_common(mu, gamma)?;
    Ok(BarrierSpec { kind: BarrierKind::CartPoleAngle { theta_l, theta_h }, mu, gamma })
}

pub fn car_obstacle_barrier(o_x: f64, o_y: f64, o_r: f64, mu: f64, gamma: f64) -> Result<BarrierSpec> {
    car_obstacle_barrier_for(0, o_x, o_y, o_r, mu, gamma)
}

pub fn car_obstacle_barrier_for(
    car: usize,
    o_x: f64,
    o_y: f64,
    o_r: f64,
    mu: f64,
    gamma: f64,
) -> Result<BarrierSpec> {
    if !(o_r.is_finite() && o_r >= 0.0) || !o_x.is_finite() || !o_y.is_finite() {
        return Err(Error::InvalidParameter(format!("bad obstacle ({o_x}, {o_y}, r={o_r})")));
    }
    check_common(mu, gamma)?;
    Ok(BarrierSpec { kind: BarrierKind::CarObstacle { car, o_x, o_y, o_r }, mu, gamma })
}

pub fn car_pair_barrier(i: usize, j: usize, car_radius: f64, mu: f64, gamma: f64) -> Result<BarrierSpec> {
    if i == j {
        return Err(Error::InvalidParameter(format!("pair barrier needs two distinct cars, got {i}")));
    }
    if !(car_radius.is_finite() && car_radius >= 0.0) {
        return Err(Error::InvalidParameter(format!("car radius must be >= 0, got {car_radius}")));
    }
    check_common(mu, gamma)?;
    Ok(BarrierSpec { kind: BarrierKind::CarPair { i, j, car_radius }, mu, gamma })
}

/// One pair barrier per unordered pair of cars, in lexicographic order.
pub fn all_car_pairs(num_cars: usize, car_radius: f64, mu: f64, gamma: f64) -> Result<Vec<BarrierSpec>> {
    let mut out = Vec::new();
    for i in 0..num_cars {
        for j in i + 1..num_cars {
            out.push(car_pair_barrier(i, j, car_radius, mu, gamma)?);
        }
    }
    Ok(out)
}

impl BarrierSpec {
    /// Checks that the barrier addresses coordinates the system has.
    pub fn validate_for(&self, system: &SystemModel) -> Result<()> {
        use crate::dynamics::SystemParams as P;
        let ok = match (self.kind, system.params()) {
            (BarrierKind::PendulumBox { .. }, P::Pendulum(_)) => true,
            (BarrierKind::CartPosition { .. } | BarrierKind::CartPoleAngle { .. }, P::CartPole(_)) => true,
            (BarrierKind::CarObstacle { car, .. }, P::Car2d(p)) => car < p.num_cars,
            (BarrierKind::CarPair { i, j, .. }, P::Car2d(p)) => i < p.num_cars && j < p.num_cars,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("barrier {:?} does not apply to {:?}", self.kind, system.params())))
        }
    }

    /// `h(x)`.
    pub fn eval<S: Scalar>(&self, x: &[S]) -> S {
        let mu = self.mu;
        match self.kind {
            BarrierKind::PendulumBox { theta_l, theta_h } => {
                (S::cst(theta_h) - x[0]) * (x[0] - S::cst(theta_l)) - x[1].sq().scale(mu)
            }
            BarrierKind::CartPosition { x_l, x_h } => {
                (S::cst(x_h) - x[0]) * (x[0] - S::cst(x_l)) - x[2].sq().scale(mu)
            }
            BarrierKind::CartPoleAngle { theta_l, theta_h } => {
                (S::cst(theta_h) - x[1]) * (x[1] - S::cst(theta_l)) - x[3].sq().scale(mu)
            }
            BarrierKind::CarObstacle { car, o_x, o_y, o_r } => {
                let o = 4 * car;
                (x[o] - S::cst(o_x)).sq() + (x[o + 1] - S::cst(o_y)).sq() - S::cst(o_r * o_r)
                    - x[o + 3].sq().scale(mu)
            }
            BarrierKind::CarPair { i, j, car_radius } => {
                let (a, b) = (4 * i, 4 * j);
                let sep = 2.0 * car_radius;
                (x[a] - x[b]).sq() + (x[a + 1] - x[b + 1]).sq() - S::cst(sep * sep)
                    - (x[a + 3].sq() + x[b + 3].sq()).scale(mu)
            }
        }
    }

    /// `∂h/∂x`.
    pub fn grad<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let mut g = vec![S::zero(); x.len()];
        let mu = self.mu;
        match self.kind {
            BarrierKind::PendulumBox { theta_l, theta_h } => {
                g[0] = S::cst(theta_h + theta_l) - x[0].scale(2.0);
                g[1] = x[1].scale(-2.0 * mu);
            }
            BarrierKind::CartPosition { x_l, x_h } => {
                g[0] = S::cst(x_h + x_l) - x[0].scale(2.0);
                g[2] = x[2].scale(-2.0 * mu);
            }
            BarrierKind::CartPoleAngle { theta_l, theta_h } => {
                g[1] = S::cst(theta_h + theta_l) - x[1].scale(2.0);
                g[3] = x[3].scale(-2.0 * mu);
            }
            BarrierKind::CarObstacle { car, o_x, o_y, .. } => {
                let o = 4 * car;
                g[o] = (x[o] - S::cst(o_x)).scale(2.0);
                g[o + 1] = (x[o + 1] - S::cst(o_y)).scale(2.0);
                g[o + 3] = x[o + 3].scale(-2.0 * mu);
            }
            BarrierKind::CarPair { i, j, .. } => {
                let (a, b) = (4 * i, 4 * j);
                let dx = (x[a] - x[b]).scale(2.0);
                let dy = (x[a + 1] - x[b + 1]).scale(2.0);
                g[a] = dx;
                g[a + 1] = dy;
                g[a + 3] = x[a + 3].scale(-2.0 * mu);
                g[b] = -dx;
                g[b + 1] = -dy;
                g[b + 3] = x[b + 3].scale(-2.0 * mu);
            }
        }
        g
    }

    /// Constant Hessian `∂²h/∂x²`, row-major `n × n`.
    pub fn hessian(&self, n: usize) -> Vec<f64> {
        let mut h = vec![0.0; n * n];
        let mut add = |i: usize, j: usize, v: f64| h[i * n + j] += v;
        let mu = self.mu;
        match self.kind {
            BarrierKind::PendulumBox { .. } => {
                add(0, 0, -2.0);
                add(1, 1, -2.0 * mu);
            }
            BarrierKind::CartPosition { .. } => {
                add(0, 0, -2.0);
                add(2, 2, -2.0 * mu);
            }
            BarrierKind::CartPoleAngle { .. } => {
                add(1, 1, -2.0);
                add(3, 3, -2.0 * mu);
            }
            BarrierKind::CarObstacle { car, .. } => {
                let o = 4 * car;
                add(o, o, 2.0);
                add(o + 1, o + 1, 2.0);
                add(o + 3, o + 3, -2.0 * mu);
            }
            BarrierKind::CarPair { i, j, .. } => {
                let (a, b) = (4 * i, 4 * j);
                for k in 0..2 {
                    add(a + k, a + k, 2.0);
                    add(b + k, b + k, 2.0);
                    add(a + k, b + k, -2.0);
                    add(b + k, a + k, -2.0);
                }
                add(a + 3, a + 3, -2.0 * mu);
                add(b + 3, b + 3, -2.0 * mu);
            }
        }
        h
    }

    /// State coordinates whose square is penalised by `μ`.
    pub fn velocity_indices(&self) -> Vec<usize> {
        match self.kind {
            BarrierKind::PendulumBox { .. } => vec![1],
            BarrierKind::CartPosition { .. } => vec![2],
            BarrierKind::CartPoleAngle { .. } => vec![3],
            BarrierKind::CarObstacle { car, .. } => vec![4 * car + 3],
            BarrierKind::CarPair { i, j, .. } => vec![4 * i + 3, 4 * j + 3],
        }
    }

    /// Itô correction `½ tr(∂²h/∂x² ΣΣᵀ)`.
    pub fn trace_term(&self, system: &SystemModel, x: &[f64]) -> f64 {
        let n = system.n_x();
        let hess = self.hessian(n);
        let gram = system.diffusion_gram(x);
        0.5 * hess.iter().zip(&gram).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Human-readable label used in CSV headers and reports.
    pub fn label(&self) -> String {
        match self.kind {
            BarrierKind::PendulumBox { .. } => "pendulum_angle".into(),
            BarrierKind::CartPosition { .. } => "cart_position".into(),
            BarrierKind::CartPoleAngle { .. } => "pole_angle".into(),
            BarrierKind::CarObstacle { car, o_x, o_y, .. } => format!("car{}_obstacle_{o_x}_{o_y}", car + 1),
            BarrierKind::CarPair { i, j, .. } => format!("cars_{}_{}", i + 1, j + 1),
        }
    }
}

/// `c_row = −(∂h/∂x)ᵀG(x)`, `d = γh + (∂h/∂x)ᵀf + trace` for any scalar type.
///
/// `trace` is passed in because it is constant in the state for every
/// supplied barrier.
pub(crate) fn constraint_terms<S: Scalar>(
    spec: &BarrierSpec,
    system: &SystemModel,
    x: &[S],
    f: &[S],
    g: &[S],
    trace: f64,
) -> (Vec<S>, S) {
    let n_u = system.n_u();
    let grad = spec.grad(x);
    let mut c = vec![S::zero(); n_u];
    let mut lf = S::zero();
    for (i, gi) in grad.iter().enumerate() {
        lf += *gi * f[i];
        for j in 0..n_u {
            c[j] += -*gi * g[i * n_u + j];
        }
    }
    let d = spec.eval(x).scale(spec.gamma) + lf + S::cst(trace);
    (c, d)
}

pub fn constraint_row(spec: &BarrierSpec, system: &SystemModel, x: &[f64]) -> ConstraintRow {
    let f = system.drift(x);
    let g = system.actuation(x);
    let trace = spec.trace_term(system, x);
    let (c_row, d) = constraint_terms(spec, system, x, &f, &g, trace);
    ConstraintRow { c_row, d }
}

/// Outcome of probing `L_g h = (∂h/∂x)ᵀG` over sample states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelativeDegreeReport {
    pub samples: usize,
    pub nonzero: usize,
    pub fraction_nonzero: f64,
    /// Indices of samples where `‖L_g h‖ ≤ tolerance`.
    pub flagged: Vec<usize>,
}

pub fn relative_degree_check(
    spec: &BarrierSpec,
    system: &SystemModel,
    samples: &[Vec<f64>],
    tolerance: f64,
) -> RelativeDegreeReport {
    let mut flagged = Vec::new();
    for (k, x) in samples.iter().enumerate() {
        let row = constraint_row(spec, system, x);
        let norm = row.c_row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tolerance {
            flagged.push(k);
        }
    }
    let nonzero = samples.len() - flagged.len();
    RelativeDegreeReport {
        samples: samples.len(),
        nonzero,
        fraction_nonzero: if samples.is_empty() { f64::NAN } else { nonzero as f64 / samples.len() as f64 },
        flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn pend() -> SystemModel {
        make_pendulum(PendulumParams::default()).unwrap()
    }

    #[test]
    fn pendulum_box_values() {
        let b = pendulum_box_barrier(2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.05, 0.5).unwrap();
        assert_relative_eq!(b.eval(&[PI, 0.0]), (PI / 3.0).powi(2), epsilon = 1e-12);
        assert_relative_eq!(b.eval(&[PI, 0.0]), 1.09662, epsilon = 1e-5);
        assert_eq!(b.eval(&[4.0 * PI / 3.0, 0.0]), 0.0);
        assert_relative_eq!(b.trace_term(&pend(), &[PI, 0.0]), -0.05, epsilon = 1e-15);
        assert!(pendulum_box_barrier(1.0, 1.0, 0.1, 1.0).is_err());
        assert!(pendulum_box_barrier(0.0, 1.0, -0.1, 1.0).is_err());
        assert!(pendulum_box_barrier(0.0, 1.0, 0.1, 0.0).is_err());
    }

    #[test]
    fn pendulum_rows() {
        let s = pend();
        let b = pendulum_box_barrier(2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.05, 0.5).unwrap();
        let r = constraint_row(&b, &s, &[PI, 0.0]);
        assert_eq!(r.c_row, vec![0.0]);
        assert_relative_eq!(r.d, 0.5 * (PI / 3.0).powi(2) - 0.05, epsilon = 1e-12);
        assert_relative_eq!(r.d, 0.49831, epsilon = 1e-5);
        let r = constraint_row(&b, &s, &[PI, 1.0]);
        assert_relative_eq!(r.c_row[0], 0.2, epsilon = 1e-14);
    }

    #[test]
    fn cart_barriers() {
        let b = cartpole_position_barrier(-10.0, 10.0, 0.1, 1.0).unwrap();
        assert_eq!(b.eval(&[0.0; 4]), 100.0);
        assert_eq!(b.eval(&[10.0, 0.3, 0.0, 2.0]), 0.0);
        let g = b.grad(&[1.0, 0.0, 2.0, 0.0]);
        assert_relative_eq!(g[0], -2.0);
        assert_relative_eq!(g[2], -0.4);
        assert_eq!((g[1], g[3]), (0.0, 0.0));

        let a = cartpole_angle_barrier(PI / 2.0, 1.5 * PI, 0.1, 1.0).unwrap();
        assert_relative_eq!(a.eval(&[0.0, PI, 0.0, 0.0]), 2.4674, epsilon = 1e-4);
        assert_eq!(a.eval(&[3.0, PI / 2.0, 1.0, 0.0]), 0.0);

        // row uses G row 4: c = −(−2μθ̇)(−cosθ)/(l(m_c + m_p sin²θ))
        let s = make_cartpole(CartPoleParams::default()).unwrap();
        let x = [0.0, 2.5, 0.0, 0.7];
        let r = constraint_row(&a, &s, &x);
        let den = 0.5 * (1.0 + 0.01 * x[1].sin().powi(2));
        let expected = -((-2.0 * 0.1 * 0.7) * (-x[1].cos()) / den);
        assert_relative_eq!(r.c_row[0], expected, epsilon = 1e-14);
    }

    #[test]
    fn car_barriers() {
        let o = car_obstacle_barrier(1.0, 1.0, 0.3, 0.05, 1.0).unwrap();
        assert_relative_eq!(o.eval(&[0.0; 4]), 1.91, epsilon = 1e-14);
        assert_relative_eq!(o.eval(&[1.3, 1.0, 0.4, 0.0]), 0.0, epsilon = 1e-14);
        let pairs = all_car_pairs(4, 0.05, 0.1, 1.0).unwrap();
        assert_eq!(pairs.len(), 6);
        let p = car_pair_barrier(0, 1, 0.05, 0.1, 1.0).unwrap();
        let mut x = vec![0.0; 8];
        x[4] = 0.1;
        assert_relative_eq!(p.eval(&x), 0.0, epsilon = 1e-15);
        x[4] = 2.0;
        x[3] = 0.1;
        x[7] = 0.1;
        assert_relative_eq!(p.eval(&x), 3.988, epsilon = 1e-12);
        let s = make_car2d(4, Car2dParams { num_cars: 4, sigma: 0.1 }).unwrap();
        let x16: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let pp = car_pair_barrier(1, 3, 0.05, 0.1, 1.0).unwrap();
        let g = pp.grad(&x16);
        for (k, v) in g.iter().enumerate() {
            if !(4..8).contains(&k) && !(12..16).contains(&k) {
                assert_eq!(*v, 0.0);
            }
        }
        assert_relative_eq!(pp.trace_term(&s, &x16), -2.0 * 0.1 * 0.01, epsilon = 1e-15);
        assert!(car_pair_barrier(2, 2, 0.05, 0.1, 1.0).is_err());
    }

    #[test]
    fn relative_degree() {
        let s = pend();
        let b = pendulum_box_barrier(2.0 * PI / 3.0, 4.0 * PI / 3.0, 0.05, 0.5).unwrap();
        let samples: Vec<Vec<f64>> = (1..50).map(|k| vec![PI + 0.01 * k as f64, 0.1 * k as f64 - 2.45]).collect();
        let rep = relative_degree_check(&b, &s, &samples, 1e-12);
        assert_eq!(rep.fraction_nonzero, 1.0);
        let rep = relative_degree_check(&b, &s, &[vec![2.5, 0.0]], 1e-12);
        assert_eq!(rep.flagged, vec![0]);

        let car = make_car2d(1, Car2dParams::default()).unwrap();
        let o = car_obstacle_barrier(1.0, 1.0, 0.3, 0.05, 1.0).unwrap();
        let rep = relative_degree_check(&o, &car, &[vec![0.0, 0.0, 0.3, 0.0], vec![0.0, 0.0, 0.3, 0.5]], 1e-12);
        assert_eq!(rep.flagged, vec![0]);
        let row = constraint_row(&o, &car, &[0.0, 0.0, 0.3, 0.5]);
        assert_eq!(row.c_row[0], 0.0);
        assert_relative_eq!(row.c_row[1], 2.0 * 0.05 * 0.5);
    }

    #[test]
    fn validation_against_system() {
        let b = pendulum_box_barrier(2.0, 4.0, 0.05, 0.5).unwrap();
        assert!(b.validate_for(&pend()).is_ok());
        let car = make_car2d(2, Car2dParams::default()).unwrap();
        assert!(b.validate_for(&car).is_err());
        assert!(car_pair_barrier(0, 2, 0.05, 0.1, 1.0).unwrap().validate_for(&car).is_err());
    }
}
