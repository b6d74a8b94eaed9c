//! Control-affine stochastic systems `dx = (f(x) + G(x)u)dt + Σ(x)dw` and
//! their Euler–Maruyama discretization.
//!
//! Matrices returned by [`SystemModel::actuation`] and
//! [`SystemModel::diffusion`] are dense row-major buffers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    /// Viscous damping.
    pub b: f64,
    /// Pole length (m).
    pub l: f64,
    pub g: f64,
    /// Point mass (kg); inertia is `m·l²`.
    pub m: f64,
    pub sigma: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { b: 0.1, l: 0.5, g: 9.81, m: 2.0, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub m_p: f64,
    pub m_c: f64,
    pub l: f64,
    pub g: f64,
    pub sigma: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self { m_p: 0.01, m_c: 1.0, l: 0.5, g: 9.81, sigma: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Car2dParams {
    pub num_cars: usize,
    pub sigma: f64,
}

impl Default for Car2dParams {
    fn default() -> Self {
        Self { num_cars: 1, sigma: 0.1 }
    }
}

/// Physical system selection plus its constants, as stored in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemParams {
    Pendulum(PendulumParams),
    CartPole(CartPoleParams),
    Car2d(Car2dParams),
}

impl SystemParams {
    pub fn build(&self) -> Result<SystemModel> {
        match *self {
            SystemParams::Pendulum(p) => make_pendulum(p),
            SystemParams::CartPole(p) => make_cartpole(p),
            SystemParams::Car2d(p) => make_car2d(p.num_cars, p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    params: SystemParams,
    n_x: usize,
    n_u: usize,
    n_w: usize,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be non-negative, got {v}")))
    }
}

pub fn make_pendulum(p: PendulumParams) -> Result<SystemModel> {
    positive("pendulum mass m", p.m)?;
    positive("pendulum length l", p.l)?;
    non_negative("pendulum damping b", p.b)?;
    non_negative("sigma", p.sigma)?;
    if !p.g.is_finite() {
        return Err(Error::InvalidParameter("gravity must be finite".into()));
    }
    Ok(SystemModel { params: SystemParams::Pendulum(p), n_x: 2, n_u: 1, n_w: 2 })
}

pub fn make_cartpole(p: CartPoleParams) -> Result<SystemModel> {
    positive("cart mass m_c", p.m_c)?;
    positive("pole length l", p.l)?;
    non_negative("pole mass m_p", p.m_p)?;
    non_negative("sigma", p.sigma)?;
    if !p.g.is_finite() {
        return Err(Error::InvalidParameter("gravity must be finite".into()));
    }
    Ok(SystemModel { params: SystemParams::CartPole(p), n_x: 4, n_u: 1, n_w: 4 })
}

pub fn make_car2d(num_cars: usize, p: Car2dParams) -> Result<SystemModel> {
    if num_cars == 0 {
        return Err(Error::InvalidParameter("num_cars must be at least 1".into()));
    }
    non_negative("sigma", p.sigma)?;
    let p = Car2dParams { num_cars, ..p };
    Ok(SystemModel {
        params: SystemParams::Car2d(p),
        n_x: 4 * num_cars,
        n_u: 2 * num_cars,
        n_w: 4 * num_cars,
    })
}

impl SystemModel {
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    /// Noise intensity on the actuated rows.
    pub fn sigma(&self) -> f64 {
        match self.params {
            SystemParams::Pendulum(p) => p.sigma,
            SystemParams::CartPole(p) => p.sigma,
            SystemParams::Car2d(p) => p.sigma,
        }
    }

    pub fn state_labels(&self) -> Vec<String> {
        match self.params {
            SystemParams::Pendulum(_) => vec!["theta".into(), "theta_dot".into()],
            SystemParams::CartPole(_) => {
                vec!["x_c".into(), "theta".into(), "x_c_dot".into(), "theta_dot".into()]
            }
            SystemParams::Car2d(p) => (1..=p.num_cars)
                .flat_map(|i| ["p_x", "p_y", "theta", "v"].map(|s| format!("{s}_{i}")))
                .collect(),
        }
    }

    pub fn control_labels(&self) -> Vec<String> {
        match self.params {
            SystemParams::Pendulum(_) | SystemParams::CartPole(_) => vec!["u".into()],
            SystemParams::Car2d(p) => (1..=p.num_cars)
                .flat_map(|i| [format!("u_theta_{i}"), format!("u_v_{i}")])
                .collect(),
        }
    }

    pub fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_x {
            return Err(Error::ShapeMismatch(format!(
                "state has length {}, system expects {}",
                x.len(),
                self.n_x
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite state {x:?}")));
        }
        Ok(())
    }

    /// Uncontrolled drift `f(x)`.
    pub fn drift<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.n_x);
        match self.params {
            SystemParams::Pendulum(p) => {
                let inertia = p.m * p.l * p.l;
                let (th, thd) = (x[0], x[1]);
                vec![thd, -thd.scale(p.b / inertia) - th.sin().scale(p.g / p.l)]
            }
            SystemParams::CartPole(p) => {
                let (th, xd, thd) = (x[1], x[2], x[3]);
                let (s, c) = (th.sin(), th.cos());
                let den = S::cst(p.m_c) + s.sq().scale(p.m_p);
                let f3 = s.scale(p.m_p) * (thd.sq().scale(p.l) + c.scale(p.g)) / den;
                let f4 = (-(thd.sq() * c * s).scale(p.m_p * p.l) - s.scale((p.m_c + p.m_p) * p.g))
                    / den.scale(p.l);
                vec![xd, thd, f3, f4]
            }
            SystemParams::Car2d(p) => {
                let mut f = vec![S::zero(); self.n_x];
                for k in 0..p.num_cars {
                    let o = 4 * k;
                    let (th, v) = (x[o + 2], x[o + 3]);
                    f[o] = v * th.cos();
                    f[o + 1] = v * th.sin();
                }
                f
            }
        }
    }

    /// Actuation matrix `G(x)`, row-major `n_x × n_u`.
    pub fn actuation<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        debug_assert_eq!(x.len(), self.n_x);
        let mut g = vec![S::zero(); self.n_x * self.n_u];
        match self.params {
            SystemParams::Pendulum(p) => {
                g[1] = S::cst(1.0 / (p.m * p.l * p.l));
            }
            SystemParams::CartPole(p) => {
                let th = x[1];
                let den = S::cst(p.m_c) + th.sin().sq().scale(p.m_p);
                g[2] = S::cst(1.0) / den;
                g[3] = -th.cos() / den.scale(p.l);
            }
            SystemParams::Car2d(p) => {
                let n_u = self.n_u;
                for k in 0..p.num_cars {
                    let (r, c) = (4 * k, 2 * k);
                    // heading rate = v·u_theta, speed rate = u_v
                    g[(r + 2) * n_u + c] = x[r + 3];
                    g[(r + 3) * n_u + c + 1] = S::cst(1.0);
                }
            }
        }
        g
    }

    /// Diffusion matrix `Σ(x)`, row-major `n_x × n_w`.
    pub fn diffusion<S: Scalar>(&self, _x: &[S]) -> Vec<S> {
        let sigma = self.sigma();
        let mut m = vec![S::zero(); self.n_x * self.n_w];
        for row in self.noisy_rows() {
            m[row * self.n_w + row] = S::cst(sigma);
        }
        m
    }

    /// Rows of `Σ` that carry noise; every other row is identically zero.
    pub fn noisy_rows(&self) -> Vec<usize> {
        match self.params {
            SystemParams::Pendulum(_) => vec![1],
            SystemParams::CartPole(_) => vec![2, 3],
            SystemParams::Car2d(p) => (0..p.num_cars).flat_map(|k| [4 * k + 2, 4 * k + 3]).collect(),
        }
    }

    /// `ΣΣᵀ`, row-major `n_x × n_x`.
    pub fn diffusion_gram(&self, x: &[f64]) -> Vec<f64> {
        let s = self.diffusion(x);
        let (n, w) = (self.n_x, self.n_w);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..w).map(|k| s[i * w + k] * s[j * w + k]).sum();
            }
        }
        out
    }
}

pub(crate) fn mat_vec<S: Scalar>(m: &[S], rows: usize, cols: usize, v: &[S]) -> Vec<S> {
    (0..rows)
        .map(|i| {
            let mut acc = S::zero();
            for j in 0..cols {
                acc += m[i * cols + j] * v[j];
            }
            acc
        })
        .collect()
}

pub(crate) fn mat_t_vec<S: Scalar>(m: &[S], rows: usize, cols: usize, v: &[S]) -> Vec<S> {
    (0..cols)
        .map(|j| {
            let mut acc = S::zero();
            for i in 0..rows {
                acc += m[i * cols + j] * v[i];
            }
            acc
        })
        .collect()
}

/// One explicit Euler–Maruyama step `x + f·dt + G·u·dt + Σ·dw`.
pub fn euler_maruyama_step(
    system: &SystemModel,
    x: &[f64],
    u: &[f64],
    dt: f64,
    dw: &[f64],
) -> Result<Vec<f64>> {
    if x.len() != system.n_x() || u.len() != system.n_u() || dw.len() != system.n_w() {
        return Err(Error::ShapeMismatch(format!(
            "step got x:{} u:{} dw:{}, system expects {}/{}/{}",
            x.len(),
            u.len(),
            dw.len(),
            system.n_x(),
            system.n_u(),
            system.n_w()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    Ok(step_unchecked(system, x, u, dt, dw))
}

pub(crate) fn step_unchecked<S: Scalar>(
    system: &SystemModel,
    x: &[S],
    u: &[S],
    dt: f64,
    dw: &[S],
) -> Vec<S> {
    let (n_x, n_u, n_w) = (system.n_x(), system.n_u(), system.n_w());
    let f = system.drift(x);
    let gu = mat_vec(&system.actuation(x), n_x, n_u, u);
    let sdw = mat_vec(&system.diffusion(x), n_x, n_w, dw);
    (0..n_x)
        .map(|i| x[i] + (f[i] + gu[i]).scale(dt) + sdw[i])
        .collect()
}

/// Seeded Brownian-increment generator. Each `(seed, stream)` pair is an
/// independent reproducible sequence.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Entries i.i.d. `Normal(0, dt)`.
    pub fn sample(&mut self, n_w: usize, dt: f64) -> Vec<f64> {
        let sd = dt.sqrt();
        (0..n_w)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                z * sd
            })
            .collect()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

pub fn sample_noise(stream: &mut NoiseStream, n_w: usize, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    Ok(stream.sample(n_w, dt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn pendulum() -> SystemModel {
        make_pendulum(PendulumParams::default()).unwrap()
    }

    #[test]
    fn pendulum_defaults() {
        let p = PendulumParams::default();
        assert_relative_eq!(p.m * p.l * p.l, 0.5);
        let s = pendulum();
        let f = s.drift(&[PI, 0.0]);
        assert!(f[0].abs() < 1e-15 && f[1].abs() < 1e-12);
        let f = s.drift(&[PI / 2.0, 1.0]);
        assert_relative_eq!(f[0], 1.0);
        assert_relative_eq!(f[1], -19.82, epsilon = 1e-12);
        assert_eq!(s.actuation(&[0.3, 0.1]), vec![0.0, 2.0]);
        assert_eq!(s.diffusion(&[0.3, 0.1]), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(make_pendulum(PendulumParams { m: 0.0, ..Default::default() }).is_err());
        assert!(make_pendulum(PendulumParams { l: -1.0, ..Default::default() }).is_err());
        assert!(make_cartpole(CartPoleParams { m_c: 0.0, ..Default::default() }).is_err());
        assert!(make_cartpole(CartPoleParams { l: 0.0, ..Default::default() }).is_err());
        assert!(make_car2d(0, Car2dParams::default()).is_err());
    }

    #[test]
    fn cartpole_values() {
        let s = make_cartpole(CartPoleParams::default()).unwrap();
        let z = [0.0; 4];
        assert_eq!(s.drift(&z), vec![0.0; 4]);
        let g = s.actuation(&z);
        assert_relative_eq!(g[2], 1.0);
        assert_relative_eq!(g[3], -2.0);
    }

    #[test]
    fn car_values() {
        let s = make_car2d(1, Car2dParams::default()).unwrap();
        for phi in [0.0, 1.0, -2.5] {
            assert_eq!(s.drift(&[0.0, 0.0, phi, 0.0]), vec![0.0; 4]);
        }
        let g = s.actuation(&[0.0, 0.0, 0.0, 2.0]);
        // rows: px, py, theta, v; columns: u_theta, u_v
        assert_eq!(g, vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
        let s4 = make_car2d(4, Car2dParams::default()).unwrap();
        assert_eq!((s4.n_x(), s4.n_u(), s4.n_w()), (16, 8, 16));
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let g = s4.actuation(&x);
        // block-diagonal: car 3 steering column only sees car 3 speed
        assert_eq!(g[(8 + 2) * 8 + 4], x[11]);
        assert_eq!(g[(8 + 2) * 8 + 0], 0.0);
    }

    #[test]
    fn euler_steps() {
        let s = pendulum();
        let x = euler_maruyama_step(&s, &[PI, 0.0], &[0.0], 0.02, &[0.0, 0.0]).unwrap();
        assert_eq!(x[0], PI);
        assert!(x[1].abs() < 1e-12);
        let x = euler_maruyama_step(&s, &[PI, 0.0], &[1.0], 0.02, &[0.0, 0.0]).unwrap();
        assert_eq!(x[0], PI);
        assert_relative_eq!(x[1], 0.04, epsilon = 1e-12);
        assert!(euler_maruyama_step(&s, &[PI], &[0.0], 0.02, &[0.0, 0.0]).is_err());
        assert!(euler_maruyama_step(&s, &[PI, 0.0], &[0.0], 0.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let mut a = NoiseStream::new(7, 3);
        let (a1, a2) = (a.sample(4, 0.02), a.sample(4, 0.02));
        assert_ne!(a1, a2);
        let mut b = NoiseStream::new(7, 3);
        assert_eq!(a1, b.sample(4, 0.02));
        assert_eq!(a2, b.sample(4, 0.02));
        let mut c = NoiseStream::new(7, 4);
        assert_ne!(a1, c.sample(4, 0.02));
        assert!(sample_noise(&mut c, 0, 0.02).unwrap().is_empty());
        assert!(sample_noise(&mut c, 2, -1.0).is_err());
    }

    #[test]
    fn noise_variance() {
        let mut s = NoiseStream::new(1, 0);
        let v = s.sample(1_000_000, 0.02);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!((var - 0.02).abs() < 1e-3, "variance {var}");
    }

    #[test]
    fn unactuated_rows_have_no_noise() {
        let systems = [
            pendulum(),
            make_cartpole(CartPoleParams::default()).unwrap(),
            make_car2d(3, Car2dParams::default()).unwrap(),
        ];
        for s in systems {
            let x = vec![0.4; s.n_x()];
            let m = s.diffusion(&x);
            let noisy = s.noisy_rows();
            for r in 0..s.n_x() {
                let row = &m[r * s.n_w()..(r + 1) * s.n_w()];
                assert_eq!(row.iter().any(|v| *v != 0.0), noisy.contains(&r));
            }
        }
    }
}
