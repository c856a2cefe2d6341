//! Simulation designs: a two-factor model, two nonparametric sieve models
//! (power and sine series), and a potential-outcomes treatment design.
//!
//! Every draw comes from one `ChaCha8` stream seeded by [`DgpSpec::seed`],
//! in a fixed order, so a spec always produces bit-identical output.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::ObservedPanel;
use crate::treatment::TreatmentPanel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpFamily {
    /// `y = b1 f1 + b2 f2 + e` with all loadings and factors `N(1/sqrt 2, 1)`.
    Factor,
    /// `h_t(z) = sum_r |U_tr| r^-3 sin(r z)`, `U ~ N(2, 1)`.
    Sine,
    /// `h_t(z) = sum_r |U_tr| r^-3 z^r`, `U ~ N(2, 1)`.
    Poly,
    /// Control `sum_r |U_tr| r^-a sin(r z)`, treated adds `2 r^-a sin(r z)`,
    /// `U ~ N(0, 1)`; the observation mechanism assigns treatment.
    Treatment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Missingness {
    /// Every cell observed with probability `p`.
    Uniform(f64),
    /// `p_i ~ Uniform[lo, hi]` per unit.
    Heterogeneous { lo: f64, hi: f64 },
}

impl Default for Missingness {
    fn default() -> Self {
        Missingness::Heterogeneous { lo: 0.3, hi: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub family: DgpFamily,
    pub n: usize,
    pub t: usize,
    pub noise_sd: f64,
    pub missing: Missingness,
    /// Number of series terms kept in the sieve designs.
    pub series_truncation: usize,
    /// Decay power of the treatment design's series coefficients.
    pub decay_a: f64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(family: DgpFamily, n: usize, t: usize, seed: u64) -> Self {
        DgpSpec {
            family,
            n,
            t,
            noise_sd: 1.0,
            missing: Missingness::default(),
            series_truncation: 100,
            decay_a: 2.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 {
            return Err(Error::InvalidOptions("dimensions must be positive".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidOptions("noise_sd must be nonnegative".into()));
        }
        match self.missing {
            Missingness::Uniform(p) if !(p > 0.0 && p <= 1.0) => {
                return Err(Error::InvalidOptions(format!(
                    "observation probability {p} not in (0, 1]"
                )));
            }
            Missingness::Heterogeneous { lo, hi } if !(0.0 < lo && lo <= hi && hi <= 1.0) => {
                return Err(Error::InvalidOptions(format!(
                    "need 0 < lo <= hi <= 1, got [{lo}, {hi}]"
                )));
            }
            _ => {}
        }
        if self.series_truncation == 0 {
            return Err(Error::InvalidOptions(
                "series truncation must be at least 1".into(),
            ));
        }
        if !(self.decay_a > 1.0) {
            return Err(Error::InvalidOptions("decay_a must exceed 1".into()));
        }
        Ok(())
    }

    /// Same design, different seed.
    pub fn reseeded(&self, seed: u64) -> DgpSpec {
        DgpSpec {
            seed,
            ..self.clone()
        }
    }
}

/// A completion design draw: the latent matrix before masking and the
/// observed panel.
#[derive(Debug, Clone)]
pub struct PanelSample {
    pub truth: DMatrix<f64>,
    pub panel: ObservedPanel,
    pub propensities: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct TreatmentSample {
    /// `M1 - M0`.
    pub effect: DMatrix<f64>,
    pub control: DMatrix<f64>,
    pub treated: DMatrix<f64>,
    pub panel: TreatmentPanel,
    pub propensities: DVector<f64>,
}

#[derive(Debug, Clone)]
pub enum Generated {
    Panel(PanelSample),
    Treatment(TreatmentSample),
}

pub fn generate(spec: &DgpSpec) -> Result<Generated> {
    match spec.family {
        DgpFamily::Treatment => generate_treatment(spec).map(Generated::Treatment),
        _ => generate_panel(spec).map(Generated::Panel),
    }
}

pub fn generate_panel(spec: &DgpSpec) -> Result<PanelSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let truth = match spec.family {
        DgpFamily::Factor => factor_truth(spec, &mut rng),
        DgpFamily::Sine => series_truth(spec, &mut rng, 3.0, Basis::Sine, 2.0),
        DgpFamily::Poly => series_truth(spec, &mut rng, 3.0, Basis::Power, 2.0),
        DgpFamily::Treatment => {
            return Err(Error::InvalidOptions(
                "treatment design produces a treatment panel; use generate_treatment".into(),
            ))
        }
    };
    let propensities = draw_propensities(spec, &mut rng);
    let mask = draw_mask(&propensities, spec.t, &mut rng);
    let values = add_noise(&truth, spec.noise_sd, &mut rng);
    let panel = ObservedPanel::new(values, mask)?;
    Ok(PanelSample {
        truth,
        panel,
        propensities,
    })
}

pub fn generate_treatment(spec: &DgpSpec) -> Result<TreatmentSample> {
    spec.validate()?;
    if spec.family != DgpFamily::Treatment {
        return Err(Error::InvalidOptions("not a treatment design".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, t, r) = (spec.n, spec.t, spec.series_truncation);
    let zeta = draw_zeta(n, &mut rng);
    let u = DMatrix::from_fn(t, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let basis = basis_matrix(&zeta, r, Basis::Sine);
    let control_coef = DMatrix::from_fn(t, r, |s, k| u[(s, k)].abs() * decay(k, spec.decay_a));
    let treated_coef = DMatrix::from_fn(t, r, |s, k| {
        (u[(s, k)].abs() + 2.0) * decay(k, spec.decay_a)
    });
    let control = &basis * control_coef.transpose();
    let treated = &basis * treated_coef.transpose();
    let propensities = draw_propensities(spec, &mut rng);
    let assignment = draw_mask(&propensities, t, &mut rng);
    let noise = add_noise(&DMatrix::zeros(n, t), spec.noise_sd, &mut rng);
    let outcomes = DMatrix::from_fn(n, t, |i, s| {
        let base = if assignment[(i, s)] {
            treated[(i, s)]
        } else {
            control[(i, s)]
        };
        base + noise[(i, s)]
    });
    let panel = TreatmentPanel::new(outcomes, assignment)?;
    Ok(TreatmentSample {
        effect: &treated - &control,
        control,
        treated,
        panel,
        propensities,
    })
}

#[derive(Clone, Copy)]
enum Basis {
    Sine,
    Power,
}

/// `r^-a` for the 0-based term index `k` (i.e. `r = k + 1`).
fn decay(k: usize, a: f64) -> f64 {
    ((k + 1) as f64).powf(-a)
}

fn draw_zeta(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    (0..n).map(|_| unit.sample(rng)).collect()
}

fn basis_matrix(zeta: &[f64], r: usize, basis: Basis) -> DMatrix<f64> {
    DMatrix::from_fn(zeta.len(), r, |i, k| {
        let order = (k + 1) as f64;
        match basis {
            Basis::Sine => (order * zeta[i]).sin(),
            Basis::Power => zeta[i].powi(k as i32 + 1),
        }
    })
}

fn factor_truth(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let dist = Normal::new(std::f64::consts::FRAC_1_SQRT_2, 1.0).expect("valid normal");
    let loadings = DMatrix::from_fn(spec.n, 2, |_, _| dist.sample(rng));
    let factors = DMatrix::from_fn(spec.t, 2, |_, _| dist.sample(rng));
    loadings * factors.transpose()
}

fn series_truth(
    spec: &DgpSpec,
    rng: &mut ChaCha8Rng,
    power: f64,
    basis: Basis,
    mean: f64,
) -> DMatrix<f64> {
    let zeta = draw_zeta(spec.n, rng);
    let dist = Normal::new(mean, 1.0).expect("valid normal");
    let r = spec.series_truncation;
    let coef = DMatrix::from_fn(spec.t, r, |_, k| dist.sample(rng).abs() * decay(k, power));
    basis_matrix(&zeta, r, basis) * coef.transpose()
}

fn draw_propensities(spec: &DgpSpec, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match spec.missing {
        Missingness::Uniform(p) => DVector::from_element(spec.n, p),
        Missingness::Heterogeneous { lo, hi } => {
            if lo == hi {
                DVector::from_element(spec.n, lo)
            } else {
                let dist = Uniform::new(lo, hi).expect("valid range");
                DVector::from_fn(spec.n, |_, _| dist.sample(rng))
            }
        }
    }
}

/// Row-major Bernoulli draws, `P(mask_it) = p_i`.
fn draw_mask(p: &DVector<f64>, t: usize, rng: &mut ChaCha8Rng) -> DMatrix<bool> {
    let n = p.len();
    let mut mask = DMatrix::from_element(n, t, false);
    for i in 0..n {
        for s in 0..t {
            mask[(i, s)] = rng.random::<f64>() < p[i];
        }
    }
    mask
}

fn add_noise(truth: &DMatrix<f64>, sd: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, t) = truth.shape();
    let mut out = truth.clone();
    for i in 0..n {
        for s in 0..t {
            let e: f64 = rng.sample(StandardNormal);
            out[(i, s)] += sd * e;
        }
    }
    out
}

/// `sum_{r > R} r^-3 <= 1 / (2 R^2)`: bound on the truncated tail of the
/// cubic-decay series per unit of `max |U|`.
pub fn cubic_tail_bound(truncation: usize) -> f64 {
    1.0 / (2.0 * (truncation as f64).powi(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        for family in [DgpFamily::Factor, DgpFamily::Sine, DgpFamily::Poly] {
            let spec = DgpSpec::new(family, 30, 20, 99);
            let a = generate_panel(&spec).unwrap();
            let b = generate_panel(&spec).unwrap();
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.panel, b.panel);
        }
        let spec = DgpSpec::new(DgpFamily::Treatment, 30, 20, 5);
        let a = generate_treatment(&spec).unwrap();
        let b = generate_treatment(&spec).unwrap();
        assert_eq!(a.effect, b.effect);
        assert_eq!(a.panel, b.panel);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_panel(&DgpSpec::new(DgpFamily::Sine, 10, 10, 1)).unwrap();
        let b = generate_panel(&DgpSpec::new(DgpFamily::Sine, 10, 10, 2)).unwrap();
        assert_ne!(a.truth, b.truth);
    }

    #[test]
    fn truncation_tail_is_small() {
        // brute-force the tail against the integral bound
        let tail: f64 = (101..2_000_000).map(|r| (r as f64).powi(-3)).sum();
        assert!(tail <= cubic_tail_bound(100));
        assert!(cubic_tail_bound(100) <= 5e-5);
    }

    #[test]
    fn treatment_effect_shape_with_unit_coefficients() {
        // with U fixed at 1 the effect is 2 sum r^-2 sin(r z), independent of U
        let spec = DgpSpec::new(DgpFamily::Treatment, 40, 3, 11);
        let s = generate_treatment(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zeta = draw_zeta(40, &mut rng);
        for (i, z) in zeta.iter().enumerate() {
            let direct: f64 = (1..=100)
                .map(|r| 2.0 * (r as f64).powi(-2) * (r as f64 * z).sin())
                .sum();
            for t in 0..3 {
                assert!((s.effect[(i, t)] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_missingness_rate() {
        let mut spec = DgpSpec::new(DgpFamily::Factor, 200, 200, 3);
        spec.missing = Missingness::Uniform(0.5);
        let s = generate_panel(&spec).unwrap();
        let frac = s.panel.observed_count() as f64 / 40_000.0;
        assert!((frac - 0.5).abs() < 0.01);
    }

    #[test]
    fn noiseless_full_observation_shows_truth() {
        let mut spec = DgpSpec::new(DgpFamily::Poly, 10, 8, 3);
        spec.noise_sd = 0.0;
        spec.missing = Missingness::Uniform(1.0);
        let s = generate_panel(&spec).unwrap();
        assert_eq!(s.panel.values(), &s.truth);
    }

    #[test]
    fn spec_validation() {
        let mut spec = DgpSpec::new(DgpFamily::Factor, 10, 10, 0);
        spec.missing = Missingness::Heterogeneous { lo: 0.8, hi: 0.2 };
        assert!(spec.validate().is_err());
        let mut spec = DgpSpec::new(DgpFamily::Treatment, 10, 10, 0);
        spec.decay_a = 1.0;
        assert!(spec.validate().is_err());
    }
}
