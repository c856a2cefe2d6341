//! Two-step least-squares debiasing of the penalized estimate.
//!
//! The penalized fit is used only for its leading left singular vectors.
//! Factors are then estimated period by period by OLS on those loadings,
//! loadings are re-estimated unit by unit by OLS on the factors, and the
//! completed matrix is their product. Each regression runs exactly once.

use nalgebra::{DMatrix, DVector};

use crate::error::{DesignAxis, Error, Result};
use crate::linalg::{guarded_inverse, pseudo_inverse_psd, weighted_gram};
use crate::panel::{estimate_propensity, floored_propensity, ObservedPanel};
use crate::parallel;
use crate::solver::{solve_nuclear_norm, LowRankEstimate, SolverOptions};

/// Singular values below this fraction of the largest count as zero when
/// checking how many loadings can be extracted.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct FactorFit {
    pub k: usize,
    /// `sqrt(N)` times the top `k` left singular vectors of the penalized fit.
    pub beta_init: DMatrix<f64>,
    /// `T x k`, one OLS coefficient vector per period.
    pub factors: DMatrix<f64>,
    /// `N x k`, one OLS coefficient vector per unit.
    pub loadings: DMatrix<f64>,
    pub m_hat: DMatrix<f64>,
    /// The penalized first-stage estimate on the full panel. `None` for the
    /// sample-splitting variant, which only fits the two halves and whose
    /// matrices carry `2k` columns.
    pub initial: Option<LowRankEstimate>,
}

pub fn initial_loadings(est: &LowRankEstimate, k: usize) -> Result<DMatrix<f64>> {
    let available = crate::linalg::numerical_rank(&est.singular_values, RANK_TOLERANCE);
    if k == 0 || k > available || k > est.left_vectors.ncols() {
        return Err(Error::RankDeficient {
            requested: k,
            available,
        });
    }
    let n = est.left_vectors.nrows() as f64;
    Ok(est.left_vectors.columns(0, k) * n.sqrt())
}

/// Per-period OLS of observed outcomes on the rows of `beta`.
pub fn estimate_factors(panel: &ObservedPanel, beta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_rows(beta, panel.n_units())?;
    let (n, t) = panel.shape();
    let rows = parallel::map_range(t, |s| {
        let observed = (0..n).filter(|&j| panel.is_observed(j, s));
        ols(beta, observed.map(|j| (j, panel.values()[(j, s)]))).ok_or(Error::SingularDesign {
            axis: DesignAxis::Period,
            index: s,
        })
    });
    stack_rows(rows, beta.ncols())
}

/// Per-unit OLS of observed outcomes on the rows of `factors`.
pub fn estimate_loadings(panel: &ObservedPanel, factors: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_rows(factors, panel.n_periods())?;
    let (n, t) = panel.shape();
    let rows = parallel::map_range(n, |i| {
        let observed = (0..t).filter(|&s| panel.is_observed(i, s));
        ols(factors, observed.map(|s| (s, panel.values()[(i, s)]))).ok_or(Error::SingularDesign {
            axis: DesignAxis::Unit,
            index: i,
        })
    });
    stack_rows(rows, factors.ncols())
}

fn check_rows(x: &DMatrix<f64>, expected: usize) -> Result<()> {
    if x.nrows() != expected || x.ncols() == 0 {
        return Err(Error::ShapeMismatch {
            expected: (expected, x.ncols().max(1)),
            found: x.shape(),
        });
    }
    Ok(())
}

/// `(sum x_j x_j')^{-1} sum x_j y_j` over the given `(row, y)` pairs.
fn ols<I>(x: &DMatrix<f64>, obs: I) -> Option<DVector<f64>>
where
    I: Iterator<Item = (usize, f64)> + Clone,
{
    let gram = weighted_gram(x, obs.clone().map(|(j, _)| (j, 1.0)));
    let mut rhs = DVector::zeros(x.ncols());
    for (j, y) in obs {
        rhs.axpy(y, &x.row(j).transpose(), 1.0);
    }
    guarded_inverse(&gram).map(|inv| inv * rhs)
}

fn stack_rows(rows: Vec<Result<DVector<f64>>>, k: usize) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(rows.len(), k);
    for (r, row) in rows.into_iter().enumerate() {
        out.row_mut(r).copy_from(&row?.transpose());
    }
    Ok(out)
}

/// Solves the penalized problem, accepting a non-converged iterate.
pub(crate) fn penalized_fit(
    panel: &ObservedPanel,
    opts: &SolverOptions,
) -> Result<LowRankEstimate> {
    let prop = estimate_propensity(panel)?;
    match solve_nuclear_norm(panel, &prop, opts) {
        Ok(est) => Ok(est),
        Err(Error::DidNotConverge { estimate }) => Ok(*estimate),
        Err(e) => Err(e),
    }
}

/// Steps two through five given a penalized estimate.
pub fn refit_from_estimate(
    panel: &ObservedPanel,
    initial: LowRankEstimate,
    k: usize,
) -> Result<FactorFit> {
    if initial.m_tilde.shape() != panel.shape() {
        return Err(Error::ShapeMismatch {
            expected: panel.shape(),
            found: initial.m_tilde.shape(),
        });
    }
    if is_zero_panel(panel) {
        return Ok(zero_fit(panel, k, Some(initial)));
    }
    let beta_init = initial_loadings(&initial, k)?;
    let factors = estimate_factors(panel, &beta_init)?;
    let loadings = estimate_loadings(panel, &factors)?;
    let m_hat = &loadings * factors.transpose();
    if m_hat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(FactorFit {
        k,
        beta_init,
        factors,
        loadings,
        m_hat,
        initial: Some(initial),
    })
}

fn is_zero_panel(panel: &ObservedPanel) -> bool {
    panel.observed().all(|(_, _, y)| y == 0.0)
}

/// Completion of an identically zero panel: every OLS coefficient is zero.
fn zero_fit(panel: &ObservedPanel, k: usize, initial: Option<LowRankEstimate>) -> FactorFit {
    let (n, t) = panel.shape();
    let beta_init = DMatrix::from_fn(n, k, |i, j| if i == j { (n as f64).sqrt() } else { 0.0 });
    FactorFit {
        k,
        beta_init,
        factors: DMatrix::zeros(t, k),
        loadings: DMatrix::zeros(n, k),
        m_hat: DMatrix::zeros(n, t),
        initial,
    }
}

/// The full estimator: penalized fit, loadings from its singular vectors,
/// then one pass of period-wise and unit-wise OLS.
///
/// A solver that stops at `max_iters` without meeting `rel_tol` still
/// yields a fit; check `initial.converged`.
pub fn tls_fit(panel: &ObservedPanel, k: usize, opts: &SolverOptions) -> Result<FactorFit> {
    let initial = penalized_fit(panel, opts)?;
    refit_from_estimate(panel, initial, k)
}

/// Benchmark variant with sample splitting over periods.
///
/// Periods are split into even and odd positions and the estimator is
/// cross-fitted: within each half, factors are estimated by OLS on initial
/// loadings taken from the penalized fit of the *other* half, and unit
/// loadings are then estimated from that half's factors alone. Each unit's
/// loading regression therefore sees only about `T/2` periods; it uses a
/// pseudo-inverse so that short or empty rows yield minimum-norm loadings
/// instead of an error.
///
/// The result stacks both halves: `loadings` is `N x 2k` (even-half
/// loadings, then odd-half loadings) and `factors` is `T x 2k` with even
/// periods in the first `k` columns and odd periods in the last `k`, so
/// `m_hat = loadings * factors'` still holds. `beta_init` is the pair of
/// initial loadings in the same layout. If a half's penalized fit has
/// numerical rank below `k`, its penalty is halved up to
/// `MAX_LAMBDA_HALVINGS` times. `seed` is reserved for randomized splits
/// and currently unused.
pub fn tls_fit_sample_split(
    panel: &ObservedPanel,
    k: usize,
    opts: &SolverOptions,
    _seed: u64,
) -> Result<FactorFit> {
    let (n, t) = panel.shape();
    if t < 4 {
        return Err(Error::TooFewPeriods {
            periods: t,
            required: 4,
        });
    }
    if k == 0 {
        return Err(Error::RankDeficient {
            requested: 0,
            available: 0,
        });
    }
    if is_zero_panel(panel) {
        let mut fit = zero_fit(panel, 2 * k, None);
        fit.k = k;
        return Ok(fit);
    }
    let halves: [Vec<usize>; 2] = [(0..t).step_by(2).collect(), (1..t).step_by(2).collect()];
    let parts = [
        panel.select_periods_allow_empty_rows(&halves[0]),
        panel.select_periods_allow_empty_rows(&halves[1]),
    ];
    let (b0, b1) = parallel::join(
        || half_loadings(&parts[0], k, opts),
        || half_loadings(&parts[1], k, opts),
    );
    let betas = [b0?, b1?];

    let mut beta_init = DMatrix::zeros(n, 2 * k);
    let mut factors = DMatrix::zeros(t, 2 * k);
    let mut loadings = DMatrix::zeros(n, 2 * k);
    for h in 0..2 {
        let f = estimate_factors(&parts[h], &betas[1 - h])?;
        let l = min_norm_loadings(&parts[h], &f);
        beta_init.columns_mut(h * k, k).copy_from(&betas[h]);
        loadings.columns_mut(h * k, k).copy_from(&l);
        for (r, &s) in halves[h].iter().enumerate() {
            factors.view_mut((s, h * k), (1, k)).copy_from(&f.row(r));
        }
    }
    let m_hat = &loadings * factors.transpose();
    if m_hat.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(FactorFit {
        k,
        beta_init,
        factors,
        loadings,
        m_hat,
        initial: None,
    })
}

const MAX_LAMBDA_HALVINGS: usize = 20;

/// Initial loadings from the penalized fit of one half, shrinking the
/// penalty while the fit has fewer than `k` usable singular vectors.
fn half_loadings(half: &ObservedPanel, k: usize, opts: &SolverOptions) -> Result<DMatrix<f64>> {
    let prop = floored_propensity(half);
    let mut opts = *opts;
    let mut halvings = 0;
    loop {
        let est = match solve_nuclear_norm(half, &prop, &opts) {
            Ok(est) => est,
            Err(Error::DidNotConverge { estimate }) => *estimate,
            Err(e) => return Err(e),
        };
        match initial_loadings(&est, k) {
            Err(Error::RankDeficient { .. })
                if halvings < MAX_LAMBDA_HALVINGS && est.lambda > 0.0 =>
            {
                opts = opts.with_lambda(0.5 * est.lambda);
                halvings += 1;
            }
            other => return other,
        }
    }
}

/// Per-unit least squares on `factors` via the pseudo-inverse of the Gram
/// matrix. Units without observations get zero loadings.
fn min_norm_loadings(panel: &ObservedPanel, factors: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, t) = panel.shape();
    let rows = parallel::map_range(n, |i| {
        let observed: Vec<usize> = (0..t).filter(|&s| panel.is_observed(i, s)).collect();
        let gram = weighted_gram(factors, observed.iter().map(|&s| (s, 1.0)));
        let mut rhs = DVector::zeros(factors.ncols());
        for &s in &observed {
            rhs.axpy(panel.values()[(i, s)], &factors.row(s).transpose(), 1.0);
        }
        Ok(pseudo_inverse_psd(&gram) * rhs)
    });
    stack_rows(rows, factors.ncols()).expect("rows are infallible")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn estimate_from(m: DMatrix<f64>) -> LowRankEstimate {
        let svd = crate::linalg::svd(&m).unwrap();
        let rank = svd.numerical_rank(RANK_TOLERANCE);
        LowRankEstimate {
            singular_values: svd.singular_values.as_slice().to_vec(),
            left_vectors: svd.u.columns(0, rank).into_owned(),
            m_tilde: m,
            objective_trace: vec![0.0],
            converged: true,
            lambda: 0.0,
        }
    }

    fn gaussian(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn rank_one_loadings() {
        let u = col(&[
            std::f64::consts::FRAC_1_SQRT_2,
            std::f64::consts::FRAC_1_SQRT_2,
        ]);
        let v = col(&[0.6, 0.8]);
        let est = estimate_from(&u * v.transpose() * 5.0);
        let beta = initial_loadings(&est, 1).unwrap();
        assert!((beta - col(&[1.0, 1.0])).amax() < 1e-12);
        assert!(matches!(
            initial_loadings(&est, 2),
            Err(Error::RankDeficient {
                requested: 2,
                available: 1
            })
        ));
    }

    #[test]
    fn loadings_are_scaled_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = gaussian(30, 3, &mut rng) * gaussian(20, 3, &mut rng).transpose();
        let beta = initial_loadings(&estimate_from(m), 3).unwrap();
        let gram = beta.transpose() * &beta / 30.0;
        assert!((gram - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn factor_ols_hand_examples() {
        let panel = ObservedPanel::complete(DMatrix::from_column_slice(2, 1, &[3.0, 6.0])).unwrap();
        let f = estimate_factors(&panel, &col(&[1.0, 2.0])).unwrap();
        assert!((f[(0, 0)] - 3.0).abs() < 1e-12);

        // only unit 2 observed in the first period
        let values = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 5.0, 1.0]);
        let mask = DMatrix::from_row_slice(2, 2, &[false, true, true, true]);
        let panel = ObservedPanel::new(values, mask).unwrap();
        let f = estimate_factors(&panel, &col(&[1.0, 2.0])).unwrap();
        assert!((f[(0, 0)] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn exact_linear_fits() {
        let beta = col(&[1.0, -2.0, 0.5]);
        let panel = ObservedPanel::complete(&beta * 4.0).unwrap();
        let f = estimate_factors(&panel, &beta).unwrap();
        assert!((f[(0, 0)] - 4.0).abs() < 1e-12);

        let factors = col(&[2.0, 1.0, -1.0]);
        let panel = ObservedPanel::complete((&factors * 1.5).transpose()).unwrap();
        let b = estimate_loadings(&panel, &factors).unwrap();
        assert!((b[(0, 0)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn loading_ols_hand_example() {
        let panel = ObservedPanel::complete(DMatrix::from_row_slice(1, 2, &[4.0, 6.0])).unwrap();
        let b = estimate_loadings(&panel, &col(&[1.0, 1.0])).unwrap();
        assert!((b[(0, 0)] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn singular_unit_design_is_reported() {
        // unit 1 observes only one period but K = 2
        let values = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
        let mask = DMatrix::from_row_slice(2, 3, &[true, true, true, true, false, false]);
        let panel = ObservedPanel::new(values, mask).unwrap();
        let factors = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            estimate_loadings(&panel, &factors),
            Err(Error::SingularDesign {
                axis: DesignAxis::Unit,
                index: 1
            })
        ));
    }

    #[test]
    fn zero_panel_gives_zero_fit() {
        let panel = ObservedPanel::complete(DMatrix::zeros(5, 4)).unwrap();
        let fit = tls_fit(&panel, 2, &SolverOptions::default()).unwrap();
        assert_eq!(fit.m_hat, DMatrix::zeros(5, 4));
        let fit = tls_fit_sample_split(&panel, 1, &SolverOptions::default(), 0).unwrap();
        assert_eq!(fit.m_hat, DMatrix::zeros(5, 4));
    }

    #[test]
    fn rotation_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let truth = gaussian(15, 2, &mut rng) * gaussian(12, 2, &mut rng).transpose();
        let noise = gaussian(15, 12, &mut rng) * 0.3;
        let mut mask = DMatrix::from_fn(15, 12, |_, _| rng.random::<f64>() < 0.7);
        for i in 0..12 {
            mask[(i, i)] = true;
            mask[(i + 3, i)] = true;
        }
        let panel = ObservedPanel::new(truth + noise, mask).unwrap();
        let beta = gaussian(15, 2, &mut rng);
        let base = {
            let f = estimate_factors(&panel, &beta).unwrap();
            estimate_loadings(&panel, &f).unwrap() * f.transpose()
        };
        let angle: f64 = 0.7;
        let rot =
            DMatrix::from_row_slice(2, 2, &[angle.cos(), -angle.sin(), angle.sin(), angle.cos()]);
        for b in [&beta * &rot, &beta * -3.0] {
            let f = estimate_factors(&panel, &b).unwrap();
            let m = estimate_loadings(&panel, &f).unwrap() * f.transpose();
            assert!((m - &base).amax() < 1e-9);
        }
    }

    #[test]
    fn period_regressions_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let values = gaussian(10, 6, &mut rng);
        let panel = ObservedPanel::complete(values).unwrap();
        let beta = gaussian(10, 2, &mut rng);
        let full = estimate_factors(&panel, &beta).unwrap();
        let keep = [0, 1, 2, 4, 5];
        let sub = estimate_factors(&panel.select_periods(&keep).unwrap(), &beta).unwrap();
        for (r, &s) in keep.iter().enumerate() {
            assert_eq!(sub.row(r), full.row(s));
        }
    }

    #[test]
    fn sample_split_needs_four_periods() {
        let panel = ObservedPanel::complete(DMatrix::from_element(4, 3, 1.0)).unwrap();
        assert!(matches!(
            tls_fit_sample_split(&panel, 1, &SolverOptions::default(), 0),
            Err(Error::TooFewPeriods {
                periods: 3,
                required: 4
            })
        ));
    }

    #[test]
    fn exact_recovery_noiseless() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = gaussian(20, 2, &mut rng) * gaussian(16, 2, &mut rng).transpose();
        let panel = ObservedPanel::complete(m.clone()).unwrap();
        let opts = SolverOptions::default().with_lambda(1e-3);
        for fit in [
            tls_fit(&panel, 2, &opts).unwrap(),
            tls_fit_sample_split(&panel, 2, &opts, 0).unwrap(),
        ] {
            assert!((&fit.m_hat - &m).norm() / m.norm() < 1e-6);
            assert_eq!(fit.m_hat, &fit.loadings * fit.factors.transpose());
        }
    }

    #[test]
    fn sample_split_tolerates_units_missing_from_a_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = gaussian(30, 1, &mut rng) * gaussian(12, 1, &mut rng).transpose();
        // unit 0 is observed only in odd periods
        let mask = DMatrix::from_fn(30, 12, |i, s| i != 0 || s % 2 == 1);
        let panel = ObservedPanel::new(m.clone(), mask).unwrap();
        let fit = tls_fit_sample_split(&panel, 1, &SolverOptions::default().with_lambda(1e-3), 0)
            .unwrap();
        assert_eq!(fit.loadings.shape(), (30, 2));
        assert_eq!(fit.factors.shape(), (12, 2));
        assert_eq!(fit.loadings[(0, 0)], 0.0);
        for i in 1..30 {
            for s in 0..12 {
                assert!((fit.m_hat[(i, s)] - m[(i, s)]).abs() < 1e-6 * m.norm());
            }
        }
        for s in (1..12).step_by(2) {
            assert!((fit.m_hat[(0, s)] - m[(0, s)]).abs() < 1e-6 * m.norm());
        }
    }
}
