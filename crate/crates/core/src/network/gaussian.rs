//! Likelihood heads.
//!
//! The joint head parameterizes a 4x4 covariance as `Sigma = L^T L` with `L`
//! upper triangular. The ten free values are the upper triangle of `L` in
//! row-major order, with diagonal entries stored as logarithms, so every real
//! vector maps to a positive definite covariance and each covariance has
//! exactly one parameter vector.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, RngState, ScalarKernel};

/// Log-scale outputs (log-diagonals, log std devs, raw correlations) are
/// clamped to `[-LOG_CAP, LOG_CAP]` before use. The gradient is zero beyond.
pub const LOG_CAP: f64 = 10.0;

/// `(row, col)` of each entry of the parameter vector.
pub const THETA_INDEX: [(usize, usize); 10] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 1),
    (1, 2),
    (1, 3),
    (2, 2),
    (2, 3),
    (3, 3),
];

const DIAG_SLOTS: [usize; 4] = [0, 4, 7, 9];

fn clamp_log(v: f64) -> (f64, bool) {
    let c = v.clamp(-LOG_CAP, LOG_CAP);
    (c, c == v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogCholParams {
    theta: [f64; 10],
}

type Mat4 = [[f64; 4]; 4];

impl LogCholParams {
    pub fn new(theta: [f64; 10]) -> Result<Self> {
        if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Range(format!("log-Cholesky entry {i} is not finite")));
        }
        Ok(Self { theta })
    }

    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        let arr: [f64; 10] = theta
            .try_into()
            .map_err(|_| Error::shape("LogCholParams", format!("expected 10 values, got {}", theta.len())))?;
        Self::new(arr)
    }

    pub fn theta(&self) -> &[f64; 10] {
        &self.theta
    }

    /// Upper-triangular factor with positive diagonal.
    pub fn factor(&self) -> Mat4 {
        factor(&self.theta)
    }

    /// `log det Sigma`, read straight off the stored log-diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * DIAG_SLOTS.iter().map(|&k| clamp_log(self.theta[k]).0).sum::<f64>()
    }
}

fn factor(theta: &[f64]) -> Mat4 {
    let mut l = [[0.0; 4]; 4];
    for (k, &(i, j)) in THETA_INDEX.iter().enumerate() {
        l[i][j] = if i == j {
            clamp_log(theta[k]).0.exp()
        } else {
            theta[k]
        };
    }
    l
}

/// `Sigma = L^T L`.
pub fn covariance_from_logchol(theta: &LogCholParams) -> DenseMatrix {
    let l = theta.factor();
    let mut s = DenseMatrix::zeros(4, 4);
    for i in 0..4 {
        for j in 0..4 {
            // L is upper triangular: only k <= min(i, j) contributes
            let v: f64 = (0..=i.min(j)).map(|k| l[k][i] * l[k][j]).sum();
            s.set(i, j, v);
        }
    }
    s
}

/// Solves `L^T z = r` (forward substitution on the lower factor `L^T`).
fn solve_lower_t(l: &Mat4, r: &[f64; 4]) -> [f64; 4] {
    let mut z = [0.0; 4];
    for i in 0..4 {
        let s: f64 = (0..i).map(|k| l[k][i] * z[k]).sum();
        z[i] = (r[i] - s) / l[i][i];
    }
    z
}

/// Solves `L w = z` (back substitution).
fn solve_upper(l: &Mat4, z: &[f64; 4]) -> [f64; 4] {
    let mut w = [0.0; 4];
    for i in (0..4).rev() {
        let s: f64 = (i + 1..4).map(|k| l[i][k] * w[k]).sum();
        w[i] = (z[i] - s) / l[i][i];
    }
    w
}

/// 4-D Gaussian over `(x, y, a_x, a_y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian4 {
    pub mu: [f64; 4],
    pub theta: LogCholParams,
}

impl Gaussian4 {
    pub fn covariance(&self) -> DenseMatrix {
        covariance_from_logchol(&self.theta)
    }

    pub fn nll(&self, x: &[f64; 4]) -> f64 {
        gaussian4_nll(x, &self.mu, &self.theta)
    }

    /// `mu + L^T z` with `z ~ N(0, I)`.
    pub fn sample(&self, rng: &mut RngState) -> [f64; 4] {
        let l = self.theta.factor();
        let z = rng.sample_std_normal(4);
        let mut x = self.mu;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += (0..=i).map(|k| l[k][i] * z[k]).sum::<f64>();
        }
        x
    }
}

/// `-log N(x; mu, L^T L)`, through a triangular solve and the stored
/// log-diagonal. Never forms the inverse covariance.
pub fn gaussian4_nll(x: &[f64; 4], mu: &[f64; 4], theta: &LogCholParams) -> f64 {
    let l = theta.factor();
    let r = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2], x[3] - mu[3]];
    let z = solve_lower_t(&l, &r);
    let q: f64 = z.iter().map(|v| v * v).sum();
    2.0 * TAU.ln() + 0.5 * theta.log_det() + 0.5 * q
}

/// Tape kernel over `[mu (4), theta (10)]` against a fixed target.
pub struct Gaussian4Kernel {
    pub target: [f64; 4],
}

impl ScalarKernel for Gaussian4Kernel {
    fn value(&self, x: &[f64]) -> f64 {
        let mu = [x[0], x[1], x[2], x[3]];
        let theta = LogCholParams { theta: x[4..14].try_into().expect("14 inputs") };
        gaussian4_nll(&self.target, &mu, &theta)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let theta = &x[4..14];
        let l = factor(theta);
        let r: [f64; 4] = std::array::from_fn(|i| self.target[i] - x[i]);
        let z = solve_lower_t(&l, &r);
        // w = Sigma^{-1} r
        let w = solve_upper(&l, &z);
        let mut g = vec![0.0; 14];
        for i in 0..4 {
            g[i] = -w[i];
        }
        // d(0.5 r^T Sigma^{-1} r) / dL_ij = -z_i w_j on the upper triangle
        for (k, &(i, j)) in THETA_INDEX.iter().enumerate() {
            g[4 + k] = if i == j {
                let (_, free) = clamp_log(theta[k]);
                if free {
                    1.0 - z[i] * w[i] * l[i][i]
                } else {
                    0.0
                }
            } else {
                -z[i] * w[j]
            };
        }
        g
    }
}

/// 2-D Gaussian with standard deviations and correlation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bivariate {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
}

impl Bivariate {
    /// From `[mu_1, mu_2, log sigma_1, log sigma_2, rho_raw]`; sigma via
    /// `exp`, rho via `tanh`.
    pub fn from_raw(raw: &[f64]) -> Self {
        Self {
            mu: [raw[0], raw[1]],
            sigma: [clamp_log(raw[2]).0.exp(), clamp_log(raw[3]).0.exp()],
            rho: clamp_log(raw[4]).0.tanh(),
        }
    }

    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let c = self.rho * self.sigma[0] * self.sigma[1];
        [[self.sigma[0] * self.sigma[0], c], [c, self.sigma[1] * self.sigma[1]]]
    }

    pub fn sample(&self, rng: &mut RngState) -> [f64; 2] {
        let z1 = rng.std_normal();
        let z2 = rng.std_normal();
        [
            self.mu[0] + self.sigma[0] * z1,
            self.mu[1] + self.sigma[1] * (self.rho * z1 + (1.0 - self.rho * self.rho).sqrt() * z2),
        ]
    }
}

pub fn bivariate_nll(x: &[f64; 2], b: &Bivariate) -> f64 {
    let z1 = (x[0] - b.mu[0]) / b.sigma[0];
    let z2 = (x[1] - b.mu[1]) / b.sigma[1];
    let q = 1.0 - b.rho * b.rho;
    let zz = z1 * z1 + z2 * z2 - 2.0 * b.rho * z1 * z2;
    TAU.ln() + b.sigma[0].ln() + b.sigma[1].ln() + 0.5 * q.ln() + zz / (2.0 * q)
}

/// Separate Gaussians for the position and the anchor; no cross-covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdGaussianPair {
    pub position: Bivariate,
    pub anchor: Bivariate,
}

impl BdGaussianPair {
    pub fn from_raw(raw: &[f64]) -> Self {
        Self {
            position: Bivariate::from_raw(&raw[0..5]),
            anchor: Bivariate::from_raw(&raw[5..10]),
        }
    }
}

pub fn bd_nll(x_pos: &[f64; 2], x_anchor: &[f64; 2], pair: &BdGaussianPair) -> f64 {
    bivariate_nll(x_pos, &pair.position) + bivariate_nll(x_anchor, &pair.anchor)
}

/// Tape kernel over `[mu_1, mu_2, log sigma_1, log sigma_2, rho_raw]`.
pub struct BivariateKernel {
    pub target: [f64; 2],
}

impl ScalarKernel for BivariateKernel {
    fn value(&self, x: &[f64]) -> f64 {
        bivariate_nll(&self.target, &Bivariate::from_raw(x))
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let b = Bivariate::from_raw(x);
        let z1 = (self.target[0] - b.mu[0]) / b.sigma[0];
        let z2 = (self.target[1] - b.mu[1]) / b.sigma[1];
        let rho = b.rho;
        let q = 1.0 - rho * rho;
        let zz = z1 * z1 + z2 * z2 - 2.0 * rho * z1 * z2;
        let a1 = (z1 - rho * z2) / q;
        let a2 = (z2 - rho * z1) / q;
        let free = |v: f64| clamp_log(v).1;
        vec![
            -a1 / b.sigma[0],
            -a2 / b.sigma[1],
            if free(x[2]) { 1.0 - z1 * a1 } else { 0.0 },
            if free(x[3]) { 1.0 - z2 * a2 } else { 0.0 },
            if free(x[4]) { -rho - z1 * z2 + rho * zz / q } else { 0.0 },
        ]
    }
}
