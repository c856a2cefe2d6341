//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use lowrank_panel::panel::ObservedPanel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random panel with every row and column observed at least once.
pub fn random_panel(n: usize, t: usize, p: f64, rng: &mut ChaCha8Rng) -> ObservedPanel {
    let values = gaussian(n, t, rng);
    loop {
        let mask = DMatrix::from_fn(n, t, |_, _| rng.random::<f64>() < p);
        if let Ok(panel) = ObservedPanel::new(values.clone(), mask) {
            return panel;
        }
    }
}

pub fn nuclear_norm(a: &DMatrix<f64>) -> f64 {
    a.clone().svd(false, false).singular_values.sum()
}

/// `1/2 sum_obs w_i (a_it - y_it)^2 + lambda ||a||_*` with plain loops.
pub fn objective_loop(
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    w: &[f64],
    a: &DMatrix<f64>,
    lambda: f64,
) -> f64 {
    let mut fit = 0.0;
    for i in 0..y.nrows() {
        for s in 0..y.ncols() {
            if mask[(i, s)] {
                fit += 0.5 * w[i] * (a[(i, s)] - y[(i, s)]).powi(2);
            }
        }
    }
    fit + lambda * nuclear_norm(a)
}

/// Descent oracle for the weighted nuclear-norm problem. Uses the
/// variational form `||A||_* = min_{A = P Q'} (||P||^2 + ||Q||^2) / 2` with
/// full-width factors, which makes the objective smooth in `(P, Q)`, and
/// runs gradient descent with Armijo backtracking until the objective
/// stalls. Returns the minimizer `P Q'`.
pub fn factored_descent(
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    w: &[f64],
    lambda: f64,
    seed: u64,
) -> DMatrix<f64> {
    let (n, t) = y.shape();
    let r = n.min(t);
    let mut g = rng(seed);
    let mut p = gaussian(n, r, &mut g) * 0.1;
    let mut q = gaussian(t, r, &mut g) * 0.1;
    let weights = DMatrix::from_fn(n, t, |i, s| if mask[(i, s)] { w[i] } else { 0.0 });
    let smooth = |p: &DMatrix<f64>, q: &DMatrix<f64>| {
        let resid = (p * q.transpose() - y).component_mul(&weights);
        let fit: f64 = (p * q.transpose() - y).component_mul(&resid).sum() * 0.5;
        (
            fit + 0.5 * lambda * (p.norm_squared() + q.norm_squared()),
            resid,
        )
    };
    let (mut f, mut resid) = smooth(&p, &q);
    let mut step = 1.0;
    for _ in 0..2_000_000 {
        let gp = &resid * &q + &p * lambda;
        let gq = resid.transpose() * &p + &q * lambda;
        let sq = gp.norm_squared() + gq.norm_squared();
        if sq < 1e-22 {
            break;
        }
        step *= 2.0;
        loop {
            let pn = &p - &gp * step;
            let qn = &q - &gq * step;
            let (fnew, rnew) = smooth(&pn, &qn);
            if fnew <= f - 0.5 * step * sq {
                p = pn;
                q = qn;
                f = fnew;
                resid = rnew;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return p * q.transpose();
            }
        }
    }
    p * q.transpose()
}

/// Variance of a group average, written out index by index: for each
/// period in the group, `bbar' (sum_j w_jt b_j b_j')^{-1} (sum_j w_jt s2_j
/// b_j b_j') (sum_j w_jt b_j b_j')^{-1} bbar`, summed and divided by the
/// squared number of periods; plus, for each unit, `s2_i fbar' (sum_s w_is
/// f_s f_s')^{-1} fbar`, summed and divided by the squared number of units.
pub fn group_variance_loop(
    mask: &DMatrix<bool>,
    loadings: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    sigma2: &DVector<f64>,
    units: &[usize],
    periods: &[usize],
) -> f64 {
    let (n, t) = mask.shape();
    let k = loadings.ncols();
    let mut bbar = vec![0.0; k];
    for &i in units {
        for a in 0..k {
            bbar[a] += loadings[(i, a)] / units.len() as f64;
        }
    }
    let mut fbar = vec![0.0; k];
    for &s in periods {
        for a in 0..k {
            fbar[a] += factors[(s, a)] / periods.len() as f64;
        }
    }
    let mut first = 0.0;
    for &s in periods {
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut meat = DMatrix::<f64>::zeros(k, k);
        for j in 0..n {
            if !mask[(j, s)] {
                continue;
            }
            for a in 0..k {
                for b in 0..k {
                    gram[(a, b)] += loadings[(j, a)] * loadings[(j, b)];
                    meat[(a, b)] += sigma2[j] * loadings[(j, a)] * loadings[(j, b)];
                }
            }
        }
        let inv = gram.try_inverse().expect("invertible period design");
        for a in 0..k {
            for b in 0..k {
                for c in 0..k {
                    for d in 0..k {
                        first += bbar[a] * inv[(a, b)] * meat[(b, c)] * inv[(c, d)] * bbar[d];
                    }
                }
            }
        }
    }
    let mut second = 0.0;
    for &i in units {
        let mut gram = DMatrix::<f64>::zeros(k, k);
        for s in 0..t {
            if !mask[(i, s)] {
                continue;
            }
            for a in 0..k {
                for b in 0..k {
                    gram[(a, b)] += factors[(s, a)] * factors[(s, b)];
                }
            }
        }
        let inv = gram.try_inverse().expect("invertible unit design");
        for a in 0..k {
            for b in 0..k {
                second += sigma2[i] * fbar[a] * inv[(a, b)] * fbar[b];
            }
        }
    }
    let (nt, ni) = (periods.len() as f64, units.len() as f64);
    first / (nt * nt) + second / (ni * ni)
}
