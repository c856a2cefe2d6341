//! Potential-outcomes workflow: each arm of a treated panel is completed
//! separately and group-average treatment effects are tested against a
//! normal reference with the two arms' variances summed. Also hosts the
//! Benjamini-Hochberg step-up rule for testing many groups at once.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    compute_residuals, group_variance, Alternative, InferenceResult, ResidualModel,
};
use crate::panel::{GroupSpec, ObservedPanel};
use crate::parallel;
use crate::solver::SolverOptions;
use crate::tls::{tls_fit, FactorFit};

/// Realized outcomes plus the treatment indicator. Treated cells reveal the
/// treated potential outcome, the rest reveal the control outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentPanel {
    outcomes: DMatrix<f64>,
    treat: DMatrix<bool>,
}

impl TreatmentPanel {
    pub fn new(outcomes: DMatrix<f64>, treat: DMatrix<bool>) -> Result<Self> {
        if outcomes.shape() != treat.shape() {
            return Err(Error::ShapeMismatch {
                expected: outcomes.shape(),
                found: treat.shape(),
            });
        }
        if outcomes.is_empty() {
            return Err(Error::InvalidOptions("panel must be non-empty".into()));
        }
        if outcomes.iter().any(|y| !y.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(TreatmentPanel { outcomes, treat })
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treat(&self) -> &DMatrix<bool> {
        &self.treat
    }

    pub fn shape(&self) -> (usize, usize) {
        self.outcomes.shape()
    }

    /// The same outcomes with treated and control labels exchanged.
    pub fn relabeled(&self) -> TreatmentPanel {
        TreatmentPanel {
            outcomes: self.outcomes.clone(),
            treat: self.treat.map(|x| !x),
        }
    }
}

/// Control panel (observed where untreated) and treated panel (observed
/// where treated). Errors name the failing arm.
pub fn split_arms(tp: &TreatmentPanel) -> Result<(ObservedPanel, ObservedPanel)> {
    let control =
        ObservedPanel::new(tp.outcomes.clone(), tp.treat.map(|x| !x)).map_err(|e| e.in_arm(0))?;
    let treated =
        ObservedPanel::new(tp.outcomes.clone(), tp.treat.clone()).map_err(|e| e.in_arm(1))?;
    Ok((control, treated))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteOptions {
    /// Sieve dimension for the control and treated arms.
    pub k: [usize; 2],
    pub solver: [SolverOptions; 2],
    pub level: f64,
    pub alternative: Alternative,
}

impl AteOptions {
    pub fn new(k: usize, solver: SolverOptions) -> Self {
        AteOptions {
            k: [k, k],
            solver: [solver, solver],
            level: 0.95,
            alternative: Alternative::TwoSided,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub estimate: f64,
    /// Sum of the control and treated variances.
    pub variance: f64,
    /// `[control, treated]`.
    pub arm_variances: [f64; 2],
    pub std_error: f64,
    pub t_stat: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub level: f64,
    pub p_value: f64,
}

impl AteResult {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

/// Both arms completed, with their residual models.
#[derive(Debug, Clone)]
pub struct ArmFits {
    /// Indexed `[control, treated]`.
    pub panels: [ObservedPanel; 2],
    pub fits: [FactorFit; 2],
    pub residuals: [ResidualModel; 2],
}

pub fn fit_arms(tp: &TreatmentPanel, k: [usize; 2], solver: [SolverOptions; 2]) -> Result<ArmFits> {
    let (control, treated) = split_arms(tp)?;
    let fit_one = |panel: &ObservedPanel, arm: usize| -> Result<(FactorFit, ResidualModel)> {
        let fit = tls_fit(panel, k[arm], &solver[arm])?;
        let resid = compute_residuals(panel, &fit)?;
        Ok((fit, resid))
    };
    let (c, t) = parallel::join(|| fit_one(&control, 0), || fit_one(&treated, 1));
    let (fit0, res0) = c.map_err(|e| e.in_arm(0))?;
    let (fit1, res1) = t.map_err(|e| e.in_arm(1))?;
    Ok(ArmFits {
        panels: [control, treated],
        fits: [fit0, fit1],
        residuals: [res0, res1],
    })
}

impl ArmFits {
    /// `M1_hat - M0_hat` for every cell.
    pub fn effects(&self) -> DMatrix<f64> {
        &self.fits[1].m_hat - &self.fits[0].m_hat
    }

    pub fn ate(
        &self,
        group: &GroupSpec,
        level: f64,
        alternative: Alternative,
    ) -> Result<AteResult> {
        let mut arm_variances = [0.0; 2];
        for arm in 0..2 {
            arm_variances[arm] = group_variance(
                &self.panels[arm],
                &self.fits[arm],
                &self.residuals[arm],
                group,
            )
            .map_err(|e| e.in_arm(arm as u8))?;
        }
        let estimate = group.average(&self.fits[1].m_hat) - group.average(&self.fits[0].m_hat);
        let variance = arm_variances[0] + arm_variances[1];
        let r = InferenceResult::from_estimate(estimate, variance, level, alternative)?;
        Ok(AteResult {
            estimate: r.estimate,
            variance,
            arm_variances,
            std_error: r.std_error,
            t_stat: r.t_stat,
            ci_lower: r.ci_lower,
            ci_upper: r.ci_upper,
            level: r.level,
            p_value: r.p_value,
        })
    }
}

pub fn ate_inference(
    tp: &TreatmentPanel,
    group: &GroupSpec,
    opts: &AteOptions,
) -> Result<AteResult> {
    let (n, t) = tp.shape();
    group.validate_for(n, t)?;
    fit_arms(tp, opts.k, opts.solver)?.ate(group, opts.level, opts.alternative)
}

/// Benjamini-Hochberg step-up at false discovery rate `q`. Returns the
/// indices of rejected hypotheses in ascending index order.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<Vec<usize>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidOptions(format!(
            "FDR level {q} not in (0, 1)"
        )));
    }
    for (index, &value) in p_values.iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::OutOfRange { index, value });
        }
    }
    let m = p_values.len();
    let mut sorted: Vec<f64> = p_values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cutoff = (1..=m)
        .rev()
        .find(|&k| sorted[k - 1] <= k as f64 * q / m as f64)
        .map(|k| sorted[k - 1]);
    Ok(match cutoff {
        Some(c) => (0..m).filter(|&i| p_values[i] <= c).collect(),
        None => Vec::new(),
    })
}
