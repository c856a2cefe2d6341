//! Choosing the sieve dimension: a singular-value threshold rule and
//! holdout cross-validation over a candidate set.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::ObservedPanel;
use crate::parallel;
use crate::solver::{LowRankEstimate, SolverOptions};
use crate::tls::{penalized_fit, refit_from_estimate};

pub const CV_FOLDS: usize = 5;
pub const DEFAULT_CANDIDATES: [usize; 5] = [2, 4, 6, 8, 10];
const THRESHOLD_SIZE_EXPONENT: f64 = 0.55;
const THRESHOLD_LEADING_EXPONENT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    Threshold,
    CrossValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RankDiagnostics {
    Threshold {
        threshold: f64,
        /// Number of singular values at or above the threshold before the
        /// result is floored at one.
        raw_count: usize,
        singular_values: Vec<f64>,
    },
    CrossValidation {
        candidates: Vec<usize>,
        /// Holdout squared error summed over folds; infinite when a
        /// candidate failed on some fold.
        scores: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub method: RankMethod,
    pub chosen_k: usize,
    pub diagnostics: RankDiagnostics,
}

/// `((N + T) / 2)^0.55 * psi_1^0.25`.
pub fn rank_threshold_value(n: usize, t: usize, leading: f64) -> f64 {
    (0.5 * (n + t) as f64).powf(THRESHOLD_SIZE_EXPONENT) * leading.powf(THRESHOLD_LEADING_EXPONENT)
}

/// Counts singular values of the penalized estimate that reach the
/// threshold. Never returns zero.
pub fn rank_threshold(est: &LowRankEstimate, n: usize, t: usize) -> Result<RankSelection> {
    let psi = &est.singular_values;
    let leading = psi.first().copied().unwrap_or(0.0);
    if !(leading > 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let threshold = rank_threshold_value(n, t, leading);
    let raw_count = psi.iter().filter(|&&s| s >= threshold).count();
    Ok(RankSelection {
        method: RankMethod::Threshold,
        chosen_k: raw_count.max(1),
        diagnostics: RankDiagnostics::Threshold {
            threshold,
            raw_count,
            singular_values: psi.clone(),
        },
    })
}

/// Training and holdout masks for each fold. Observed cells are kept for
/// training independently with probability equal to the overall
/// observation rate; the rest of the observed cells form the holdout.
pub fn cv_splits(panel: &ObservedPanel, seed: u64) -> Vec<(DMatrix<bool>, DMatrix<bool>)> {
    let (n, t) = panel.shape();
    let rate = panel.observed_count() as f64 / (n * t) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..CV_FOLDS)
        .map(|_| {
            let mut train = DMatrix::from_element(n, t, false);
            let mut holdout = DMatrix::from_element(n, t, false);
            for i in 0..n {
                for s in 0..t {
                    let keep = rng.random::<f64>() < rate;
                    if panel.is_observed(i, s) {
                        if keep {
                            train[(i, s)] = true;
                        } else {
                            holdout[(i, s)] = true;
                        }
                    }
                }
            }
            (train, holdout)
        })
        .collect()
}

fn fold_scores(
    panel: &ObservedPanel,
    train: DMatrix<bool>,
    holdout: &DMatrix<bool>,
    candidates: &[usize],
    opts: &SolverOptions,
) -> Vec<f64> {
    let failed = vec![f64::INFINITY; candidates.len()];
    let Ok(train_panel) = panel.with_mask(train) else {
        return failed;
    };
    let Ok(initial) = penalized_fit(&train_panel, opts) else {
        return failed;
    };
    let held = holdout.iter().filter(|&&h| h).count();
    candidates
        .iter()
        .map(
            |&k| match refit_from_estimate(&train_panel, initial.clone(), k) {
                Ok(fit) if held > 0 => {
                    let sse: f64 = holdout
                        .iter()
                        .zip(panel.values().iter().zip(fit.m_hat.iter()))
                        .filter(|(h, _)| **h)
                        .map(|(_, (y, m))| (y - m).powi(2))
                        .sum();
                    sse / held as f64
                }
                Ok(_) => 0.0,
                Err(_) => f64::INFINITY,
            },
        )
        .collect()
}

/// Cross-validated choice among `candidates`. Each fold solves the
/// penalized problem once on its training cells and refits every candidate
/// from that solution. Ties go to the smaller dimension.
pub fn rank_cv(
    panel: &ObservedPanel,
    candidates: &[usize],
    opts: &SolverOptions,
    seed: u64,
) -> Result<RankSelection> {
    opts.validate()?;
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(Error::InvalidOptions(
            "rank candidates must be non-empty and positive".into(),
        ));
    }
    let mut candidates = candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();

    let splits = cv_splits(panel, seed);
    let per_fold = parallel::map_range(splits.len(), |f| {
        let (train, holdout) = &splits[f];
        fold_scores(panel, train.clone(), holdout, &candidates, opts)
    });
    let scores: Vec<f64> = (0..candidates.len())
        .map(|c| per_fold.iter().map(|fold| fold[c]).sum())
        .collect();

    let mut best: Option<usize> = None;
    for (c, &score) in scores.iter().enumerate() {
        if score.is_finite() && best.is_none_or(|b| score < scores[b]) {
            best = Some(c);
        }
    }
    let best = best.ok_or(Error::AllCandidatesFailed)?;
    Ok(RankSelection {
        method: RankMethod::CrossValidation,
        chosen_k: candidates[best],
        diagnostics: RankDiagnostics::CrossValidation { candidates, scores },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::estimate_propensity;
    use crate::solver::{solve_nuclear_norm, Lambda};
    use rand_distr::StandardNormal;

    fn estimate_with(singular_values: Vec<f64>) -> LowRankEstimate {
        let n = singular_values.len();
        LowRankEstimate {
            m_tilde: DMatrix::zeros(n, n),
            singular_values,
            left_vectors: DMatrix::zeros(n, 0),
            objective_trace: vec![0.0],
            converged: true,
            lambda: 1.0,
        }
    }

    #[test]
    fn threshold_example() {
        let est = estimate_with(vec![50.0, 30.0, 1e-6]);
        let sel = rank_threshold(&est, 100, 100).unwrap();
        let RankDiagnostics::Threshold {
            threshold,
            raw_count,
            ..
        } = sel.diagnostics
        else {
            panic!()
        };
        assert!((threshold - 33.476689).abs() < 1e-5, "{threshold}");
        assert_eq!((sel.chosen_k, raw_count), (1, 1));
    }

    #[test]
    fn threshold_floor_and_zero() {
        assert!(matches!(
            rank_threshold(&estimate_with(vec![0.0, 0.0]), 10, 10),
            Err(Error::ZeroMatrix)
        ));
        // leading value below its own threshold still yields one
        let sel = rank_threshold(&estimate_with(vec![1.0, 0.5]), 100, 100).unwrap();
        assert_eq!(sel.chosen_k, 1);
        assert!(matches!(
            sel.diagnostics,
            RankDiagnostics::Threshold { raw_count: 0, .. }
        ));
    }

    fn factor_panel(seed: u64, noise: f64) -> ObservedPanel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t) = (40, 40);
        let b = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = DMatrix::from_fn(t, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &b * f.transpose() * 2.0
            + DMatrix::from_fn(n, t, |_, _| noise * rng.sample::<f64, _>(StandardNormal));
        let mask = DMatrix::from_fn(n, t, |_, _| rng.random::<f64>() < 0.8);
        ObservedPanel::new(y, mask).unwrap()
    }

    #[test]
    fn cv_finds_two_factors() {
        let panel = factor_panel(3, 0.0);
        let opts = SolverOptions::default().with_lambda(0.5);
        let sel = rank_cv(&panel, &[1, 2, 4], &opts, 9).unwrap();
        assert_eq!(sel.chosen_k, 2, "{sel:?}");
    }

    #[test]
    fn cv_is_deterministic() {
        let panel = factor_panel(4, 0.5);
        let opts = SolverOptions::default();
        let a = rank_cv(&panel, &[1, 2, 3], &opts, 11).unwrap();
        let b = rank_cv(&panel, &[3, 2, 1], &opts, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_partition_observed_cells() {
        let panel = factor_panel(5, 1.0);
        let splits = cv_splits(&panel, 1);
        assert_eq!(splits.len(), CV_FOLDS);
        for (train, holdout) in &splits {
            for i in 0..40 {
                for s in 0..40 {
                    assert!(!(train[(i, s)] && holdout[(i, s)]));
                    assert_eq!(train[(i, s)] || holdout[(i, s)], panel.is_observed(i, s));
                }
            }
        }
        assert_ne!(splits[0].0, splits[1].0);
        assert_eq!(splits, cv_splits(&panel, 1));
    }

    #[test]
    fn cv_failures() {
        let panel = factor_panel(6, 1.0);
        let opts = SolverOptions::default();
        assert!(matches!(
            rank_cv(&panel, &[100], &opts, 0),
            Err(Error::AllCandidatesFailed)
        ));
        assert!(rank_cv(&panel, &[], &opts, 0).is_err());
        assert!(rank_cv(&panel, &[0, 1], &opts, 0).is_err());
    }

    #[test]
    fn threshold_on_strong_single_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, t) = (60, 60);
        let b = DMatrix::from_fn(n, 1, |_, _| 3.0 + rng.sample::<f64, _>(StandardNormal));
        let f = DMatrix::from_fn(t, 1, |_, _| 3.0 + rng.sample::<f64, _>(StandardNormal));
        let y = &b * f.transpose()
            + DMatrix::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let panel = ObservedPanel::complete(y).unwrap();
        let prop = estimate_propensity(&panel).unwrap();
        let opts = SolverOptions {
            lambda: Lambda::Auto,
            ..Default::default()
        };
        let est = solve_nuclear_norm(&panel, &prop, &opts).unwrap();
        assert_eq!(rank_threshold(&est, n, t).unwrap().chosen_k, 1);
    }
}
