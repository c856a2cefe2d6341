//! Inverse-probability-weighted nuclear-norm penalized completion.
//!
//! Minimizes
//!
//! ```text
//! 1/2 * || diag(p)^{-1/2} (Omega o (A - Y)) ||_F^2 + lambda * ||A||_*
//! ```
//!
//! by accelerated proximal gradient with function-value restart, starting
//! from the zero matrix. The proximal map of the nuclear norm is singular
//! value soft-thresholding.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Svd};
use crate::panel::{ObservedPanel, PropensityEstimate};

/// Multiplier on the robust noise scale in [`default_lambda`].
pub const DEFAULT_LAMBDA_SCALE: f64 = 2.0;
/// Converts a median absolute deviation into a normal standard deviation.
const MAD_TO_SD: f64 = 1.4826;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lambda {
    /// Use [`default_lambda`] on whatever panel is being fitted.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    /// `1 / L` with `L = 1 / min_i p_i`, the Lipschitz constant of the
    /// weighted quadratic.
    Lipschitz,
    Fixed(f64),
    /// Backtracking line search on the quadratic upper bound.
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub lambda: Lambda,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub step_size: StepSize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            lambda: Lambda::Auto,
            max_iters: 500,
            rel_tol: 1e-7,
            step_size: StepSize::Lipschitz,
        }
    }
}

impl SolverOptions {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Lambda::Fixed(lambda);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidOptions("rel_tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidOptions("max_iters must be at least 1".into()));
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidOptions(format!(
                    "lambda must be nonnegative, got {l}"
                )));
            }
        }
        if let StepSize::Fixed(s) = self.step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidOptions(format!(
                    "step size must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// The penalty that will be used on `panel`.
    pub fn resolve_lambda(&self, panel: &ObservedPanel, prop: &PropensityEstimate) -> f64 {
        match self.lambda {
            Lambda::Fixed(l) => l,
            Lambda::Auto => default_lambda(panel, prop),
        }
    }
}

/// The penalized estimate `M~` and its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankEstimate {
    pub m_tilde: DMatrix<f64>,
    /// All `min(N, T)` singular values of `m_tilde`, nonincreasing.
    pub singular_values: Vec<f64>,
    /// Left singular vectors for the nonzero singular values, under the
    /// crate-wide sign convention.
    pub left_vectors: DMatrix<f64>,
    /// Objective at the zero start followed by one value per iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub lambda: f64,
}

impl LowRankEstimate {
    pub fn iterations(&self) -> usize {
        self.objective_trace.len() - 1
    }

    pub fn rank(&self) -> usize {
        self.left_vectors.ncols()
    }
}

/// Proximal map of `tau * ||.||_*`.
pub fn soft_threshold_svd(a: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidOptions(format!(
            "threshold must be nonnegative, got {tau}"
        )));
    }
    Ok(shrink(a, tau)?.matrix)
}

struct Shrunk {
    matrix: DMatrix<f64>,
    svd: Svd,
    /// Thresholded singular values (same length as the SVD).
    values: Vec<f64>,
    nuclear: f64,
}

fn shrink(a: &DMatrix<f64>, tau: f64) -> Result<Shrunk> {
    let svd = linalg::svd(a)?;
    let values: Vec<f64> = svd
        .singular_values
        .iter()
        .map(|s| (s - tau).max(0.0))
        .collect();
    let rank = values.iter().take_while(|&&s| s > 0.0).count();
    let matrix = linalg::reconstruct(&svd.u, &values[..rank], &svd.v);
    let nuclear = values.iter().sum();
    Ok(Shrunk {
        matrix,
        svd,
        values,
        nuclear,
    })
}

/// Robust penalty level `c * sigma * sqrt(max(N, T))`, where `sigma` is
/// 1.4826 times the median absolute deviation of observed residuals around
/// an additive row-effect plus column-effect fit.
pub fn default_lambda(panel: &ObservedPanel, _prop: &PropensityEstimate) -> f64 {
    let (n, t) = panel.shape();
    let mut row_sum = vec![0.0; n];
    let mut row_cnt = vec![0usize; n];
    let mut col_sum = vec![0.0; t];
    let mut col_cnt = vec![0usize; t];
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, s, y) in panel.observed() {
        row_sum[i] += y;
        row_cnt[i] += 1;
        col_sum[s] += y;
        col_cnt[s] += 1;
        total += y;
        count += 1;
    }
    let grand = total / count as f64;
    let row_eff: Vec<f64> = (0..n)
        .map(|i| row_sum[i] / row_cnt[i] as f64 - grand)
        .collect();
    let col_eff: Vec<f64> = (0..t)
        .map(|s| col_sum[s] / col_cnt[s] as f64 - grand)
        .collect();
    let resid: Vec<f64> = panel
        .observed()
        .map(|(i, s, y)| y - grand - row_eff[i] - col_eff[s])
        .collect();
    let sigma = MAD_TO_SD * median_abs_deviation(resid);
    DEFAULT_LAMBDA_SCALE * sigma * (n.max(t) as f64).sqrt()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len();
    if m % 2 == 1 {
        xs[m / 2]
    } else {
        0.5 * (xs[m / 2 - 1] + xs[m / 2])
    }
}

fn median_abs_deviation(xs: Vec<f64>) -> f64 {
    let med = median(xs.clone());
    median(xs.into_iter().map(|x| (x - med).abs()).collect())
}

/// Full objective `weighted residual norm + lambda * nuclear norm`.
pub fn objective(
    panel: &ObservedPanel,
    prop: &PropensityEstimate,
    a: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    let fit = crate::panel::weighted_residual_norm(panel, prop, a)?;
    let nuclear: f64 = linalg::singular_values(a)?.iter().sum();
    Ok(fit + lambda * nuclear)
}

/// Smooth part of the objective, with observed targets and inverse weights
/// laid out densely (zero on unobserved cells).
struct WeightedQuadratic {
    target: DMatrix<f64>,
    weight: DMatrix<f64>,
}

impl WeightedQuadratic {
    fn new(panel: &ObservedPanel, prop: &PropensityEstimate) -> Self {
        let (n, t) = panel.shape();
        let target = panel.zero_filled();
        let weight = DMatrix::from_fn(n, t, |i, s| {
            if panel.is_observed(i, s) {
                prop.weight(i)
            } else {
                0.0
            }
        });
        WeightedQuadratic { target, weight }
    }

    fn value(&self, a: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for ((x, y), w) in a.iter().zip(self.target.iter()).zip(self.weight.iter()) {
            if *w != 0.0 {
                let r = x - y;
                total += w * r * r;
            }
        }
        0.5 * total
    }

    fn gradient(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = a - &self.target;
        g.component_mul_assign(&self.weight);
        g
    }
}

struct Iterate {
    x: DMatrix<f64>,
    shrunk_values: Vec<f64>,
    left: DMatrix<f64>,
    objective: f64,
}

pub fn solve_nuclear_norm(
    panel: &ObservedPanel,
    prop: &PropensityEstimate,
    opts: &SolverOptions,
) -> Result<LowRankEstimate> {
    opts.validate()?;
    if prop.p_hat().len() != panel.n_units() {
        return Err(Error::ShapeMismatch {
            expected: (panel.n_units(), 1),
            found: (prop.p_hat().len(), 1),
        });
    }
    let lambda = opts.resolve_lambda(panel, prop);
    let quad = WeightedQuadratic::new(panel, prop);
    let (n, t) = panel.shape();
    let lipschitz = 1.0 / prop.min();

    let mut current = Iterate {
        x: DMatrix::zeros(n, t),
        shrunk_values: vec![0.0; n.min(t)],
        left: DMatrix::zeros(n, 0),
        objective: quad.value(&DMatrix::zeros(n, t)),
    };
    let mut trace = vec![current.objective];
    let mut momentum_point = current.x.clone();
    let mut theta = 1.0_f64;
    let mut l_est = match opts.step_size {
        StepSize::Lipschitz => lipschitz,
        StepSize::Fixed(s) => 1.0 / s,
        StepSize::Backtracking => 1.0,
    };
    let mut converged = false;

    for _ in 0..opts.max_iters {
        let mut candidate = prox_step(&quad, &momentum_point, lambda, &mut l_est, opts.step_size)?;
        if candidate.objective > current.objective {
            // restart the momentum from the last accepted point
            theta = 1.0;
            candidate = prox_step(&quad, &current.x, lambda, &mut l_est, opts.step_size)?;
        }
        if candidate.objective > current.objective {
            // only reachable through rounding or an oversized fixed step
            trace.push(current.objective);
            momentum_point = current.x.clone();
            if matches!(opts.step_size, StepSize::Fixed(_)) {
                continue;
            }
            converged = true;
            break;
        }
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        theta = theta_next;
        momentum_point = &candidate.x + (&candidate.x - &current.x) * beta;

        let change = (current.objective - candidate.objective).abs();
        let scale = current.objective.abs();
        current = candidate;
        trace.push(current.objective);
        if change <= opts.rel_tol * scale || change == 0.0 {
            converged = true;
            break;
        }
    }

    let estimate = LowRankEstimate {
        m_tilde: current.x,
        singular_values: current.shrunk_values,
        left_vectors: current.left,
        objective_trace: trace,
        converged,
        lambda,
    };
    if converged {
        Ok(estimate)
    } else {
        Err(Error::DidNotConverge {
            estimate: Box::new(estimate),
        })
    }
}

fn prox_step(
    quad: &WeightedQuadratic,
    from: &DMatrix<f64>,
    lambda: f64,
    l_est: &mut f64,
    step: StepSize,
) -> Result<Iterate> {
    let grad = quad.gradient(from);
    let f_from = quad.value(from);
    loop {
        let z = from - &grad / *l_est;
        let sh = shrink(&z, lambda / *l_est)?;
        let f_new = quad.value(&sh.matrix);
        if matches!(step, StepSize::Backtracking) {
            let diff = &sh.matrix - from;
            let bound = f_from + grad.dot(&diff) + 0.5 * *l_est * diff.norm_squared();
            if f_new > bound * (1.0 + 1e-12) + 1e-300 {
                *l_est *= 2.0;
                continue;
            }
        }
        let rank = sh.values.iter().take_while(|&&s| s > 0.0).count();
        return Ok(Iterate {
            objective: f_new + lambda * sh.nuclear,
            left: sh.svd.u.columns(0, rank).into_owned(),
            shrunk_values: sh.values,
            x: sh.matrix,
        });
    }
}
