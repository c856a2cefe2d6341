//! Observed panels, observation masks and row-wise propensities.
//!
//! A panel is an `N x T` matrix of outcomes (units by periods) together with
//! a boolean mask. The mask is the only source of truth about which cells
//! are observed: the content of `values` at unobserved cells is never read
//! by any routine in this crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedPanel {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl ObservedPanel {
    /// Builds a panel, checking that every row and every column has at least
    /// one observed cell and that observed values are finite.
    pub fn new(values: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                expected: values.shape(),
                found: mask.shape(),
            });
        }
        let (n, t) = values.shape();
        if n == 0 || t == 0 {
            return Err(Error::InvalidOptions("panel must be non-empty".into()));
        }
        for i in 0..n {
            if !(0..t).any(|s| mask[(i, s)]) {
                return Err(Error::EmptyRow { row: i });
            }
        }
        for s in 0..t {
            if !(0..n).any(|i| mask[(i, s)]) {
                return Err(Error::EmptyColumn { col: s });
            }
        }
        if values
            .iter()
            .zip(mask.iter())
            .any(|(v, &m)| m && !v.is_finite())
        {
            return Err(Error::NonFinite);
        }
        Ok(ObservedPanel { values, mask })
    }

    /// Builds a panel from a numeric 0/1 mask.
    pub fn from_numeric_mask(values: DMatrix<f64>, mask: &DMatrix<f64>) -> Result<Self> {
        let (n, t) = mask.shape();
        let mut bools = DMatrix::from_element(n, t, false);
        for i in 0..n {
            for s in 0..t {
                let m = mask[(i, s)];
                if m == 1.0 {
                    bools[(i, s)] = true;
                } else if m != 0.0 {
                    return Err(Error::InvalidMask { row: i, col: s });
                }
            }
        }
        ObservedPanel::new(values, bools)
    }

    /// A fully observed panel.
    pub fn complete(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), true);
        ObservedPanel::new(values, mask)
    }

    pub fn n_units(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    /// Raw value storage; unobserved cells hold arbitrary content.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    #[inline]
    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[(i, t)]
    }

    /// The observed value at `(i, t)`, or `None` if the cell is missing.
    #[inline]
    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.mask[(i, t)].then(|| self.values[(i, t)])
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn row_observed_count(&self, i: usize) -> usize {
        self.mask.row(i).iter().filter(|&&m| m).count()
    }

    /// Observed cells as `(unit, period, value)` in column-major order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let n = self.n_units();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(idx, _)| (idx % n, idx / n, self.values[idx]))
    }

    /// Values with every unobserved cell replaced by zero.
    pub fn zero_filled(&self) -> DMatrix<f64> {
        self.values
            .zip_map(&self.mask, |v, m| if m { v } else { 0.0 })
    }

    /// Same values, different observation pattern. The new mask must still
    /// satisfy the panel invariants.
    pub fn with_mask(&self, mask: DMatrix<bool>) -> Result<ObservedPanel> {
        ObservedPanel::new(self.values.clone(), mask)
    }

    /// Restriction to a subset of periods, in the given order.
    pub fn select_periods(&self, periods: &[usize]) -> Result<ObservedPanel> {
        let values = self.values.select_columns(periods);
        let mask = self.mask.select_columns(periods);
        ObservedPanel::new(values, mask)
    }

    /// Like [`select_periods`](Self::select_periods) but allows units with
    /// no observation in the selected periods. Columns stay non-empty
    /// because they are taken from a valid panel.
    pub(crate) fn select_periods_allow_empty_rows(&self, periods: &[usize]) -> ObservedPanel {
        ObservedPanel {
            values: self.values.select_columns(periods),
            mask: self.mask.select_columns(periods),
        }
    }
}

/// Per-unit observation probabilities `p_i`, estimated by the observed
/// fraction of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityEstimate {
    p_hat: DVector<f64>,
}

impl PropensityEstimate {
    pub fn p_hat(&self) -> &DVector<f64> {
        &self.p_hat
    }

    pub fn min(&self) -> f64 {
        self.p_hat.min()
    }

    /// Inverse weight `1 / p_i` for unit `i`.
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        1.0 / self.p_hat[i]
    }
}

pub fn estimate_propensity(panel: &ObservedPanel) -> Result<PropensityEstimate> {
    if let Some(row) = (0..panel.n_units()).find(|&i| panel.row_observed_count(i) == 0) {
        return Err(Error::EmptyRow { row });
    }
    Ok(floored_propensity(panel))
}

/// Observed row fractions floored at `1/T`; empty rows get the floor.
pub(crate) fn floored_propensity(panel: &ObservedPanel) -> PropensityEstimate {
    let t = panel.n_periods() as f64;
    let floor = 1.0 / t;
    let p_hat = DVector::from_fn(panel.n_units(), |i, _| {
        (panel.row_observed_count(i) as f64 / t).max(floor)
    });
    PropensityEstimate { p_hat }
}

/// `1/2 * sum_{observed} (a_it - y_it)^2 / p_i`.
pub fn weighted_residual_norm(
    panel: &ObservedPanel,
    prop: &PropensityEstimate,
    a: &DMatrix<f64>,
) -> Result<f64> {
    if a.shape() != panel.shape() {
        return Err(Error::ShapeMismatch {
            expected: panel.shape(),
            found: a.shape(),
        });
    }
    Ok(weighted_residual_norm_unchecked(panel, prop, a))
}

pub(crate) fn weighted_residual_norm_unchecked(
    panel: &ObservedPanel,
    prop: &PropensityEstimate,
    a: &DMatrix<f64>,
) -> f64 {
    let mut total = 0.0;
    for (i, t, y) in panel.observed() {
        let r = a[(i, t)] - y;
        total += r * r * prop.weight(i);
    }
    0.5 * total
}

/// A rectangle of unit indices by period indices (0-based) whose average of
/// the latent matrix is an inference target.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GroupSpec {
    units: Vec<usize>,
    periods: Vec<usize>,
}

impl GroupSpec {
    pub fn new(
        units: Vec<usize>,
        periods: Vec<usize>,
        n_units: usize,
        n_periods: usize,
    ) -> Result<Self> {
        check_indices("unit", &units, n_units)?;
        check_indices("period", &periods, n_periods)?;
        Ok(GroupSpec { units, periods })
    }

    pub fn entry(i: usize, t: usize, n_units: usize, n_periods: usize) -> Result<Self> {
        GroupSpec::new(vec![i], vec![t], n_units, n_periods)
    }

    /// Every unit at a single period.
    pub fn column(t: usize, n_units: usize, n_periods: usize) -> Result<Self> {
        GroupSpec::new((0..n_units).collect(), vec![t], n_units, n_periods)
    }

    /// A single unit over every period.
    pub fn row(i: usize, n_units: usize, n_periods: usize) -> Result<Self> {
        GroupSpec::new(vec![i], (0..n_periods).collect(), n_units, n_periods)
    }

    pub fn all(n_units: usize, n_periods: usize) -> Result<Self> {
        GroupSpec::new(
            (0..n_units).collect(),
            (0..n_periods).collect(),
            n_units,
            n_periods,
        )
    }

    pub fn units(&self) -> &[usize] {
        &self.units
    }

    pub fn periods(&self) -> &[usize] {
        &self.periods
    }

    pub fn size(&self) -> usize {
        self.units.len() * self.periods.len()
    }

    /// Re-checks the indices against a panel shape.
    pub fn validate_for(&self, n_units: usize, n_periods: usize) -> Result<()> {
        check_indices("unit", &self.units, n_units)?;
        check_indices("period", &self.periods, n_periods)
    }

    /// Average of `m` over the rectangle.
    pub fn average(&self, m: &DMatrix<f64>) -> f64 {
        let mut sum = 0.0;
        for &t in &self.periods {
            for &i in &self.units {
                sum += m[(i, t)];
            }
        }
        sum / self.size() as f64
    }
}

fn check_indices(what: &str, idx: &[usize], bound: usize) -> Result<()> {
    if idx.is_empty() {
        return Err(Error::InvalidGroup(format!("empty {what} set")));
    }
    let mut seen = vec![false; bound];
    for &k in idx {
        if k >= bound {
            return Err(Error::InvalidGroup(format!(
                "{what} index {k} out of range (size {bound})"
            )));
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::InvalidGroup(format!("duplicate {what} index {k}")));
        }
    }
    Ok(())
}
