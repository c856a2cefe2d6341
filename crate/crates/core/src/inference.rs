//! Feasible variance of group averages of the completed matrix and the
//! normal-reference intervals and tests built on it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{DesignAxis, Error, Result};
use crate::linalg::{guarded_inverse, quad_form, weighted_gram};
use crate::panel::{GroupSpec, ObservedPanel};
use crate::tls::FactorFit;

/// Unit-level residual variances. Residuals are stored densely with zeros
/// on unobserved cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    pub sigma2_hat: DVector<f64>,
    pub residuals: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `H1: average > 0`.
    Greater,
    /// `H1: average < 0`.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub estimate: f64,
    pub variance: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub p_value: f64,
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// `Phi^{-1}(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidOptions(format!(
            "confidence level {level} not in (0, 1)"
        )))
    }
}

impl InferenceResult {
    /// Interval and test for `H0: average = 0` from a point estimate and
    /// its variance.
    pub fn from_estimate(
        estimate: f64,
        variance: f64,
        level: f64,
        alternative: Alternative,
    ) -> Result<Self> {
        check_level(level)?;
        if !(variance >= 0.0) || !estimate.is_finite() {
            return Err(Error::NonFinite);
        }
        let std_error = variance.sqrt();
        let z = normal_quantile(0.5 * (1.0 + level));
        let t_stat = if std_error > 0.0 {
            estimate / std_error
        } else if estimate == 0.0 {
            0.0
        } else {
            estimate.signum() * f64::INFINITY
        };
        let p_value = match alternative {
            Alternative::TwoSided => 2.0 * (1.0 - normal_cdf(t_stat.abs())),
            Alternative::Greater => 1.0 - normal_cdf(t_stat),
            Alternative::Less => normal_cdf(t_stat),
        }
        .clamp(0.0, 1.0);
        Ok(InferenceResult {
            estimate,
            variance,
            std_error,
            t_stat,
            ci_lower: estimate - z * std_error,
            ci_upper: estimate + z * std_error,
            level,
            p_value,
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

fn check_fit(panel: &ObservedPanel, fit: &FactorFit) -> Result<()> {
    let (n, t) = panel.shape();
    if fit.m_hat.shape() != (n, t) {
        return Err(Error::ShapeMismatch {
            expected: (n, t),
            found: fit.m_hat.shape(),
        });
    }
    if fit.loadings.nrows() != n
        || fit.factors.nrows() != t
        || fit.loadings.ncols() != fit.factors.ncols()
    {
        return Err(Error::ShapeMismatch {
            expected: (n, t),
            found: (fit.loadings.nrows(), fit.factors.nrows()),
        });
    }
    Ok(())
}

pub fn compute_residuals(panel: &ObservedPanel, fit: &FactorFit) -> Result<ResidualModel> {
    check_fit(panel, fit)?;
    let (n, t) = panel.shape();
    let mut residuals = DMatrix::zeros(n, t);
    let mut sum_sq = DVector::<f64>::zeros(n);
    let mut count = vec![0usize; n];
    for (i, s, y) in panel.observed() {
        let e = y - fit.m_hat[(i, s)];
        residuals[(i, s)] = e;
        sum_sq[i] += e * e;
        count[i] += 1;
    }
    let sigma2_hat = DVector::from_fn(n, |i, _| sum_sq[i] / count[i] as f64);
    Ok(ResidualModel {
        sigma2_hat,
        residuals,
    })
}

/// Estimated variance of the group average of the completed matrix.
///
/// The first term sums, over periods in the group, the sandwich
/// `b' G_t^{-1} S_t G_t^{-1} b` with `G_t = sum_j w_jt l_j l_j'`,
/// `S_t = sum_j w_jt s2_j l_j l_j'` and `b` the mean loading over the
/// group's units, divided by the squared number of periods. The second sums
/// `s2_i f' H_i^{-1} f` over units with `H_i = sum_s w_is f_s f_s'` and `f`
/// the mean factor over the group's periods, divided by the squared number
/// of units.
///
/// The normal approximation also needs the group's mean loading to stay
/// bounded away from zero; that cannot be checked from data and is not
/// enforced here.
pub fn group_variance(
    panel: &ObservedPanel,
    fit: &FactorFit,
    resid: &ResidualModel,
    group: &GroupSpec,
) -> Result<f64> {
    check_fit(panel, fit)?;
    let (n, t) = panel.shape();
    group.validate_for(n, t)?;
    if resid.sigma2_hat.len() != n {
        return Err(Error::ShapeMismatch {
            expected: (n, 1),
            found: (resid.sigma2_hat.len(), 1),
        });
    }
    let loadings = &fit.loadings;
    let factors = &fit.factors;
    let mean_loading = mean_rows(loadings, group.units());
    let mean_factor = mean_rows(factors, group.periods());

    let mut period_term = 0.0;
    for &s in group.periods() {
        let observed = || (0..n).filter(move |&j| panel.is_observed(j, s));
        let gram = weighted_gram(loadings, observed().map(|j| (j, 1.0)));
        let meat = weighted_gram(loadings, observed().map(|j| (j, resid.sigma2_hat[j])));
        let inv = guarded_inverse(&gram).ok_or(Error::SingularDesign {
            axis: DesignAxis::Period,
            index: s,
        })?;
        let a = inv * &mean_loading;
        period_term += quad_form(&meat, &a);
    }

    let mut unit_term = 0.0;
    for &i in group.units() {
        let gram = weighted_gram(
            factors,
            (0..t)
                .filter(|&s| panel.is_observed(i, s))
                .map(|s| (s, 1.0)),
        );
        let inv = guarded_inverse(&gram).ok_or(Error::SingularDesign {
            axis: DesignAxis::Unit,
            index: i,
        })?;
        unit_term += resid.sigma2_hat[i] * quad_form(&inv, &mean_factor);
    }

    let nt = group.periods().len() as f64;
    let ni = group.units().len() as f64;
    Ok((period_term / (nt * nt) + unit_term / (ni * ni)).max(0.0))
}

fn mean_rows(x: &DMatrix<f64>, rows: &[usize]) -> DVector<f64> {
    let mut m = DVector::zeros(x.ncols());
    for &r in rows {
        m += x.row(r).transpose();
    }
    m / rows.len() as f64
}

/// Group average of the completed matrix with its interval and a test of
/// `H0: average = 0`.
pub fn group_average_ci(
    panel: &ObservedPanel,
    fit: &FactorFit,
    group: &GroupSpec,
    level: f64,
) -> Result<InferenceResult> {
    let resid = compute_residuals(panel, fit)?;
    group_inference(panel, fit, &resid, group, level, Alternative::TwoSided)
}

/// As [`group_average_ci`] with precomputed residuals and a chosen
/// alternative.
pub fn group_inference(
    panel: &ObservedPanel,
    fit: &FactorFit,
    resid: &ResidualModel,
    group: &GroupSpec,
    level: f64,
    alternative: Alternative,
) -> Result<InferenceResult> {
    check_level(level)?;
    let variance = group_variance(panel, fit, resid, group)?;
    let estimate = group.average(&fit.m_hat);
    InferenceResult::from_estimate(estimate, variance, level, alternative)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::SolverOptions;
    use crate::tls::{estimate_factors, estimate_loadings, tls_fit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn fit_from(panel: &ObservedPanel, loadings: DMatrix<f64>, factors: DMatrix<f64>) -> FactorFit {
        let m_hat = &loadings * factors.transpose();
        let _ = panel;
        FactorFit {
            k: loadings.ncols(),
            beta_init: loadings.clone(),
            factors,
            loadings,
            m_hat,
            initial: None,
        }
    }

    #[test]
    fn residual_variances() {
        let values = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 5.0, 2.0, 2.0, 2.0]);
        let mask = DMatrix::from_row_slice(2, 3, &[true, true, false, true, true, true]);
        let panel = ObservedPanel::new(values, mask).unwrap();
        let fit = fit_from(
            &panel,
            DMatrix::from_element(2, 1, 0.0),
            DMatrix::from_element(3, 1, 1.0),
        );
        let r = compute_residuals(&panel, &fit).unwrap();
        assert_eq!(r.sigma2_hat[0], 1.0);
        assert_eq!(r.sigma2_hat[1], 4.0);
        assert_eq!(r.residuals[(0, 2)], 0.0);

        let exact = fit_from(
            &panel,
            DMatrix::from_element(2, 1, 2.0),
            DMatrix::from_element(3, 1, 1.0),
        );
        let panel2 = ObservedPanel::complete(exact.m_hat.clone()).unwrap();
        let r = compute_residuals(&panel2, &exact).unwrap();
        assert!(r.sigma2_hat.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn homogeneous_singleton_variance() {
        let (n, t, s2) = (7, 5, 2.5);
        let panel = ObservedPanel::complete(DMatrix::zeros(n, t)).unwrap();
        let fit = fit_from(
            &panel,
            DMatrix::from_element(n, 1, 1.0),
            DMatrix::from_element(t, 1, 1.0),
        );
        let resid = ResidualModel {
            sigma2_hat: DVector::from_element(n, s2),
            residuals: DMatrix::zeros(n, t),
        };
        let g = GroupSpec::entry(2, 3, n, t).unwrap();
        let v = group_variance(&panel, &fit, &resid, &g).unwrap();
        assert!((v - (s2 / n as f64 + s2 / t as f64)).abs() < 1e-14);

        let doubled = ResidualModel {
            sigma2_hat: resid.sigma2_hat.clone() * 2.0,
            residuals: resid.residuals.clone(),
        };
        let v2 = group_variance(&panel, &fit, &doubled, &g).unwrap();
        assert!((v2 - 2.0 * v).abs() < 1e-14);
    }

    #[test]
    fn interval_from_known_se() {
        let r = InferenceResult::from_estimate(2.0, 1.0, 0.95, Alternative::TwoSided).unwrap();
        assert!((r.ci_lower - 0.040036).abs() < 1e-6);
        assert!((r.ci_upper - 3.959964).abs() < 1e-6);
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
        assert!((r.p_value - 0.0455003).abs() < 1e-6);
        let one = InferenceResult::from_estimate(2.0, 1.0, 0.95, Alternative::Greater).unwrap();
        assert!((one.p_value - r.p_value / 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_interval() {
        let r = InferenceResult::from_estimate(1.5, 0.0, 0.9, Alternative::TwoSided).unwrap();
        assert_eq!((r.ci_lower, r.ci_upper), (1.5, 1.5));
        assert_eq!(r.p_value, 0.0);
        let r = InferenceResult::from_estimate(0.0, 0.0, 0.9, Alternative::TwoSided).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(InferenceResult::from_estimate(0.0, 1.0, 1.0, Alternative::TwoSided).is_err());
    }

    #[test]
    fn noiseless_group_has_zero_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = DMatrix::from_fn(12, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = DMatrix::from_fn(9, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let panel = ObservedPanel::complete(&b * f.transpose()).unwrap();
        let fit = tls_fit(&panel, 2, &SolverOptions::default().with_lambda(1e-3)).unwrap();
        let g = GroupSpec::new(vec![0, 3], vec![1, 2, 5], 12, 9).unwrap();
        let r = group_average_ci(&panel, &fit, &g, 0.95).unwrap();
        assert!(r.ci_upper - r.ci_lower < 1e-6);
        assert!((r.estimate - g.average(panel.values())).abs() < 1e-8);
    }

    #[test]
    fn widening_periods_shrinks_period_term() {
        let (n, t) = (10, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values = DMatrix::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let panel = ObservedPanel::complete(values).unwrap();
        let beta = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let factors = estimate_factors(&panel, &beta).unwrap();
        let loadings = estimate_loadings(&panel, &factors).unwrap();
        let fit = fit_from(&panel, loadings, factors);
        let resid = ResidualModel {
            sigma2_hat: DVector::from_element(n, 1.0),
            residuals: DMatrix::zeros(n, t),
        };
        let h_inv =
            guarded_inverse(&weighted_gram(&fit.factors, (0..t).map(|s| (s, 1.0)))).unwrap();
        let units = vec![0, 1];
        let mut last = f64::INFINITY;
        for width in 1..=t {
            let g = GroupSpec::new(units.clone(), (0..width).collect(), n, t).unwrap();
            let total = group_variance(&panel, &fit, &resid, &g).unwrap();
            let f_bar = mean_rows(&fit.factors, g.periods());
            let unit_term = units.len() as f64 * quad_form(&h_inv, &f_bar) / 4.0;
            let period_term = total - unit_term;
            assert!(period_term <= last + 1e-12);
            last = period_term;
        }
    }
}
