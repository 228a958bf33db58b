//! Class-weighted L2-penalized logistic regression.
//!
//! The objective is the weighted mean log-loss plus `||beta||^2 / (2 C n)`,
//! with the intercept left unpenalized.

use crate::optim::{lbfgs, LbfgsOptions};
use serde::{Deserialize, Serialize};

/// Lower/upper clamp applied to every probability the crate emits.
pub const PROB_EPS: f64 = 1e-12;

/// Training rows in sparse form with per-row weights.
#[derive(Debug, Clone)]
pub struct Design<'a> {
    pub rows: Vec<&'a [(u32, f64)]>,
    pub labels: Vec<bool>,
    pub weights: Vec<f64>,
    pub n_features: usize,
}

impl<'a> Design<'a> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl LogisticParams {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            coefficients: vec![0.0; n_features],
            intercept: 0.0,
        }
    }

    pub fn score(&self, features: &[(u32, f64)]) -> f64 {
        let mut z = self.intercept;
        for &(j, v) in features {
            if let Some(b) = self.coefficients.get(j as usize) {
                z += b * v;
            }
        }
        z
    }

    pub fn predict(&self, features: &[(u32, f64)]) -> f64 {
        clamp_prob(sigmoid(self.score(features)))
    }

    fn to_theta(&self) -> Vec<f64> {
        let mut t = self.coefficients.clone();
        t.push(self.intercept);
        t
    }

    fn from_theta(mut theta: Vec<f64>) -> Self {
        let intercept = theta.pop().unwrap_or(0.0);
        Self {
            coefficients: theta,
            intercept,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Penalized objective at `theta = [beta..., intercept]`; writes the gradient.
/// `c = f64::INFINITY` drops the penalty.
pub fn objective(design: &Design<'_>, c: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let d = design.n_features;
    let n = design.len() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for i in 0..design.len() {
        let row = design.rows[i];
        let mut z = theta[d];
        for &(j, v) in row {
            z += theta[j as usize] * v;
        }
        let w = design.weights[i];
        let (l, dz) = if design.labels[i] {
            (softplus(-z), sigmoid(z) - 1.0)
        } else {
            (softplus(z), sigmoid(z))
        };
        loss += w * l;
        let gz = w * dz;
        for &(j, v) in row {
            grad[j as usize] += gz * v;
        }
        grad[d] += gz;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    if c.is_finite() {
        let lam = 1.0 / (c * n);
        for j in 0..d {
            loss += 0.5 * lam * theta[j] * theta[j];
            grad[j] += lam * theta[j];
        }
    }
    loss
}

#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub params: LogisticParams,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn fit_logistic(
    design: &Design<'_>,
    c: f64,
    init: Option<&LogisticParams>,
    opts: LbfgsOptions,
) -> LogisticFit {
    let x0 = init
        .map(LogisticParams::to_theta)
        .unwrap_or_else(|| vec![0.0; design.n_features + 1]);
    let m = lbfgs(|t, g| objective(design, c, t, g), x0, opts);
    LogisticFit {
        params: LogisticParams::from_theta(m.x),
        objective: m.value,
        iterations: m.iterations,
        converged: m.converged,
    }
}

/// Regularization grid, weakest penalty last.
pub const C_GRID: [f64; 7] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];
