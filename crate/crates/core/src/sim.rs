//! Seeded Monte Carlo runs over the simulation designs.
//!
//! Replication `r` regenerates its data with seed `base ^ r`, so every
//! replication is independent of the others and of the execution order.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dgp::{generate_panel, generate_treatment, DgpFamily, DgpSpec};
use crate::error::{Error, Result};
use crate::inference::{compute_residuals, group_inference, normal_cdf, Alternative};
use crate::panel::{estimate_propensity, GroupSpec, ObservedPanel};
use crate::parallel::Execution;
use crate::rank::rank_cv;
use crate::solver::{solve_nuclear_norm, SolverOptions};
use crate::tls::{penalized_fit, tls_fit, tls_fit_sample_split};
use crate::treatment::{fit_arms, split_arms};

/// Largest tolerated fraction of failed replications.
pub const MAX_FAILURE_RATE: f64 = 0.10;
/// Rank candidates tried on the first replication of a sieve design.
pub const SIM_CANDIDATES: [usize; 6] = [1, 2, 4, 6, 8, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Tls,
    TlsSs,
    PlainNuclear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankChoice {
    Fixed(usize),
    /// Two factors for the factor design; cross-validation on the first
    /// replication for the others.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub spec: DgpSpec,
    pub estimator: Estimator,
    pub reps: usize,
    pub rank: RankChoice,
    pub cv_candidates: Vec<usize>,
    pub solver: SolverOptions,
    pub targets: Vec<GroupSpec>,
    pub level: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl McConfig {
    pub fn new(spec: DgpSpec, estimator: Estimator, reps: usize) -> Self {
        McConfig {
            spec,
            estimator,
            reps,
            rank: RankChoice::Auto,
            cv_candidates: SIM_CANDIDATES.to_vec(),
            solver: SolverOptions::default(),
            targets: Vec::new(),
            level: 0.95,
            execution: Execution::default(),
        }
    }

    pub fn with_targets(mut self, targets: Vec<GroupSpec>) -> Self {
        self.targets = targets;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.solver.validate()?;
        if self.reps == 0 {
            return Err(Error::InvalidOptions("reps must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidOptions(format!(
                "level {} not in (0, 1)",
                self.level
            )));
        }
        if let RankChoice::Fixed(0) = self.rank {
            return Err(Error::InvalidOptions("rank must be positive".into()));
        }
        for g in &self.targets {
            g.validate_for(self.spec.n, self.spec.t)?;
        }
        Ok(())
    }
}

/// Metrics for one successful replication. Per-target vectors follow the
/// order of [`McConfig::targets`]; standardized estimates and cover flags
/// are only produced by the estimator with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub frob_error: f64,
    pub estimates: Vec<f64>,
    pub truths: Vec<f64>,
    pub sq_errors: Vec<f64>,
    pub standardized: Option<Vec<f64>>,
    pub covered: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepFailure {
    pub rep: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub mean_sq_error: f64,
    pub mean_standardized: Option<f64>,
    pub sd_standardized: Option<f64>,
    pub ks_statistic: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub completed: usize,
    pub failed: usize,
    pub mean_frob_error: f64,
    pub targets: Vec<TargetSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub config: McConfig,
    /// Sieve dimension used by every replication; two entries (control,
    /// treated) for the treatment design.
    pub k_used: Vec<usize>,
    pub records: Vec<RepRecord>,
    pub failures: Vec<RepFailure>,
    pub summary: McSummary,
}

impl McReport {
    /// Aggregates rebuilt from the per-replication rows.
    pub fn recompute_summary(&self) -> McSummary {
        summarize(
            &self.records,
            self.failures.len(),
            self.config.targets.len(),
        )
    }
}

pub fn rep_seed(base: u64, rep: usize) -> u64 {
    base ^ rep as u64
}

pub fn run_mc(config: &McConfig) -> Result<McReport> {
    config.validate()?;
    let k_used = resolve_rank(config)?;
    let outcomes = config.execution.map_range(config.reps, |rep| {
        let seed = rep_seed(config.spec.seed, rep);
        (rep, seed, run_rep(config, &k_used, rep, seed))
    });
    let mut records = Vec::with_capacity(config.reps);
    let mut failures = Vec::new();
    for (rep, seed, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(RepFailure {
                rep,
                seed,
                error: e.to_string(),
            }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_RATE * config.reps as f64 || records.is_empty() {
        return Err(Error::McUnstable {
            failed: failures.len(),
            reps: config.reps,
        });
    }
    let summary = summarize(&records, failures.len(), config.targets.len());
    Ok(McReport {
        config: config.clone(),
        k_used,
        records,
        failures,
        summary,
    })
}

fn resolve_rank(config: &McConfig) -> Result<Vec<usize>> {
    let arms = if config.spec.family == DgpFamily::Treatment {
        2
    } else {
        1
    };
    match (&config.rank, config.spec.family) {
        (_, _) if config.estimator == Estimator::PlainNuclear => Ok(vec![0; arms]),
        (RankChoice::Fixed(k), _) => Ok(vec![*k; arms]),
        (RankChoice::Auto, DgpFamily::Factor) => Ok(vec![2]),
        (RankChoice::Auto, DgpFamily::Treatment) => {
            let first = generate_treatment(&config.spec.reseeded(rep_seed(config.spec.seed, 0)))?;
            let (control, treated) = split_arms(&first.panel)?;
            let cv = |p: &ObservedPanel| {
                rank_cv(p, &config.cv_candidates, &config.solver, config.spec.seed)
            };
            Ok(vec![cv(&control)?.chosen_k, cv(&treated)?.chosen_k])
        }
        (RankChoice::Auto, _) => {
            let first = generate_panel(&config.spec.reseeded(rep_seed(config.spec.seed, 0)))?;
            let sel = rank_cv(
                &first.panel,
                &config.cv_candidates,
                &config.solver,
                config.spec.seed,
            )?;
            Ok(vec![sel.chosen_k])
        }
    }
}

fn scaled_frobenius(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    (est - truth).norm() / ((truth.nrows() * truth.ncols()) as f64).sqrt()
}

struct Fitted {
    m_hat: DMatrix<f64>,
    /// Estimate and standard error per target.
    inference: Option<Vec<(f64, f64)>>,
}

fn run_rep(config: &McConfig, k_used: &[usize], rep: usize, seed: u64) -> Result<RepRecord> {
    let spec = config.spec.reseeded(seed);
    let (truth, fitted) = if spec.family == DgpFamily::Treatment {
        let sample = generate_treatment(&spec)?;
        (sample.effect, fit_treatment(config, k_used, &sample.panel)?)
    } else {
        let sample = generate_panel(&spec)?;
        (sample.truth, fit_panel(config, k_used[0], &sample.panel)?)
    };
    let mut record = RepRecord {
        rep,
        seed,
        frob_error: scaled_frobenius(&fitted.m_hat, &truth),
        estimates: Vec::new(),
        truths: Vec::new(),
        sq_errors: Vec::new(),
        standardized: fitted.inference.as_ref().map(|_| Vec::new()),
        covered: fitted.inference.as_ref().map(|_| Vec::new()),
    };
    let z = crate::inference::normal_quantile(0.5 * (1.0 + config.level));
    for (g, target) in config.targets.iter().enumerate() {
        let truth_avg = target.average(&truth);
        let est = match &fitted.inference {
            Some(inf) => inf[g].0,
            None => target.average(&fitted.m_hat),
        };
        record.estimates.push(est);
        record.truths.push(truth_avg);
        record.sq_errors.push((est - truth_avg).powi(2));
        if let (Some(inf), Some(std), Some(cov)) = (
            &fitted.inference,
            &mut record.standardized,
            &mut record.covered,
        ) {
            let se = inf[g].1;
            if !(se > 0.0) {
                return Err(Error::NonFinite);
            }
            let t = (est - truth_avg) / se;
            std.push(t);
            cov.push(t.abs() <= z);
        }
    }
    Ok(record)
}

fn fit_panel(config: &McConfig, k: usize, panel: &ObservedPanel) -> Result<Fitted> {
    match config.estimator {
        Estimator::PlainNuclear => {
            let prop = estimate_propensity(panel)?;
            let est = match solve_nuclear_norm(panel, &prop, &config.solver) {
                Err(Error::DidNotConverge { estimate }) => *estimate,
                other => other?,
            };
            Ok(Fitted {
                m_hat: est.m_tilde,
                inference: None,
            })
        }
        Estimator::TlsSs => Ok(Fitted {
            m_hat: tls_fit_sample_split(panel, k, &config.solver, config.spec.seed)?.m_hat,
            inference: None,
        }),
        Estimator::Tls => {
            let fit = tls_fit(panel, k, &config.solver)?;
            let resid = compute_residuals(panel, &fit)?;
            let inference = config
                .targets
                .iter()
                .map(|g| {
                    group_inference(panel, &fit, &resid, g, config.level, Alternative::TwoSided)
                        .map(|r| (r.estimate, r.std_error))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Fitted {
                m_hat: fit.m_hat,
                inference: Some(inference),
            })
        }
    }
}

fn fit_treatment(
    config: &McConfig,
    k_used: &[usize],
    panel: &crate::treatment::TreatmentPanel,
) -> Result<Fitted> {
    match config.estimator {
        Estimator::Tls => {
            let arms = fit_arms(panel, [k_used[0], k_used[1]], [config.solver; 2])?;
            let inference = config
                .targets
                .iter()
                .map(|g| {
                    arms.ate(g, config.level, Alternative::TwoSided)
                        .map(|r| (r.estimate, r.std_error))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Fitted {
                m_hat: arms.effects(),
                inference: Some(inference),
            })
        }
        Estimator::TlsSs | Estimator::PlainNuclear => {
            let (control, treated) = split_arms(panel)?;
            let fit = |p: &ObservedPanel, arm: usize| -> Result<DMatrix<f64>> {
                let m = if config.estimator == Estimator::TlsSs {
                    tls_fit_sample_split(p, k_used[arm], &config.solver, config.spec.seed)?.m_hat
                } else {
                    penalized_fit(p, &config.solver)?.m_tilde
                };
                Ok(m)
            };
            let m0 = fit(&control, 0).map_err(|e| e.in_arm(0))?;
            let m1 = fit(&treated, 1).map_err(|e| e.in_arm(1))?;
            Ok(Fitted {
                m_hat: m1 - m0,
                inference: None,
            })
        }
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    xs.sum::<f64>() / n as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Kolmogorov-Smirnov distance between the empirical distribution of `xs`
/// and the standard normal.
pub fn ks_statistic(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

fn summarize(records: &[RepRecord], failed: usize, n_targets: usize) -> McSummary {
    let targets = (0..n_targets)
        .map(|g| {
            let z: Option<Vec<f64>> = records
                .iter()
                .map(|r| r.standardized.as_ref().map(|s| s[g]))
                .collect();
            let covered: Option<Vec<bool>> = records
                .iter()
                .map(|r| r.covered.as_ref().map(|c| c[g]))
                .collect();
            TargetSummary {
                mean_sq_error: mean(records.iter().map(|r| r.sq_errors[g])),
                mean_standardized: z.as_ref().map(|z| mean(z.iter().copied())),
                sd_standardized: z.as_ref().map(|z| sample_sd(z)),
                ks_statistic: z.as_ref().map(|z| ks_statistic(z)),
                coverage: covered.map(|c| c.iter().filter(|&&x| x).count() as f64 / c.len() as f64),
            }
        })
        .collect();
    McSummary {
        completed: records.len(),
        failed,
        mean_frob_error: mean(records.iter().map(|r| r.frob_error)),
        targets,
    }
}
