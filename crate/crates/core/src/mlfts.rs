//! Multilevel functional time series model.
//!
//! Every size's curve is split into a size-specific mean, a common trend shared
//! by all sizes, a size-specific residual trend and an error term:
//!
//! `X_t^s(u) = μ^s(u) + R_t(u) + U_t^s(u) + e_t^s(u)`.
//!
//! Curves are centred by their size mean before averaging across sizes, so
//! `R` and `U^s` are both mean-zero and the identity holds exactly on the grid.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::{fit_fpca, FpcaBasis};
use crate::panel::{FunctionalPanel, MIN_CURVES};
use crate::scalar::Real;
use crate::scorets::ScoreForecaster;

pub const DEFAULT_COMPONENTS: usize = 6;

/// Size means, common-trend curves and size-specific curves of a panel.
#[derive(Debug, Clone)]
pub struct Decomposition<T: Real> {
    /// `S × p`.
    pub means: DMatrix<T>,
    /// `n × p`, row `t` is `R_t`.
    pub common: DMatrix<T>,
    /// One `n × p` matrix per size.
    pub specific: Vec<DMatrix<T>>,
}

pub fn decompose<T: Real>(panel: &FunctionalPanel<T>) -> Decomposition<T> {
    let (s_count, n, p) = (panel.sizes(), panel.days(), panel.points());
    let nt = T::from_count(n);
    let st = T::from_count(s_count);
    let means = DMatrix::from_fn(s_count, p, |s, j| panel.size_values(s).column(j).sum() / nt);
    let centred: Vec<DMatrix<T>> = (0..s_count)
        .map(|s| {
            let m = panel.size_values(s);
            DMatrix::from_fn(n, p, |t, j| m[(t, j)] - means[(s, j)])
        })
        .collect();
    let mut common = DMatrix::zeros(n, p);
    for c in &centred {
        common += c;
    }
    common /= st;
    let specific = centred.into_iter().map(|c| c - &common).collect();
    Decomposition {
        means,
        common,
        specific,
    }
}

/// Fitted multilevel model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlftsModel<T: Real> {
    /// `S × p` size-specific means.
    pub means: DMatrix<T>,
    /// FPCA of the common trend (`K` components).
    pub common: FpcaBasis<T>,
    /// FPCA of each size-specific trend (`L` components each).
    pub specific: Vec<FpcaBasis<T>>,
    /// One `n × p` residual matrix per size.
    pub residuals: Vec<DMatrix<T>>,
}

/// Share of retained variance attributed to the common trend for one size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceProportion<T> {
    pub ratio: T,
    /// Both variance parts were zero and `ratio` is the 0.5 convention.
    pub degenerate: bool,
}

impl<T: Real> MlftsModel<T> {
    pub fn sizes(&self) -> usize {
        self.specific.len()
    }

    pub fn points(&self) -> usize {
        self.means.ncols()
    }

    pub fn days(&self) -> usize {
        self.common.scores.nrows()
    }

    /// In-sample fit `μ^s + R̂_t + Û^s_t` of curve `t` for size `s`.
    pub fn fitted_curve(&self, s: usize, t: usize) -> Result<DVector<T>> {
        if s >= self.sizes() {
            return Err(Error::OutOfRange {
                index: s,
                len: self.sizes(),
            });
        }
        Ok(self.means.row(s).transpose()
            + self.common.reconstruct(t)?
            + self.specific[s].reconstruct(t)?)
    }

    pub fn variance_proportion(&self, s: usize) -> Result<VarianceProportion<T>> {
        let spec = self.specific.get(s).ok_or(Error::OutOfRange {
            index: s,
            len: self.sizes(),
        })?;
        let common = self.common.eigenvalues.sum();
        let specific = spec.eigenvalues.sum();
        let total = common + specific;
        Ok(if total > T::zero() {
            VarianceProportion {
                ratio: common / total,
                degenerate: false,
            }
        } else {
            VarianceProportion {
                ratio: T::lit(0.5),
                degenerate: true,
            }
        })
    }

    /// Curves assembled from given score forecasts: `common` has one entry per
    /// common component, `specific[s]` one per size-`s` component.
    pub fn assemble(&self, common: &DVector<T>, specific: &[DVector<T>]) -> Result<DMatrix<T>> {
        if common.len() != self.common.n_components() || specific.len() != self.sizes() {
            return Err(Error::Shape("score forecast count does not match the model".into()));
        }
        let trend = self.common.curve_from_scores(common);
        let mut out = DMatrix::zeros(self.sizes(), self.points());
        for (s, (basis, scores)) in self.specific.iter().zip(specific).enumerate() {
            if scores.len() != basis.n_components() {
                return Err(Error::Shape(format!(
                    "size {s}: {} specific scores for {} components",
                    scores.len(),
                    basis.n_components()
                )));
            }
            let curve = self.means.row(s).transpose() + &trend + basis.curve_from_scores(scores);
            out.set_row(s, &curve.transpose());
        }
        Ok(out)
    }

    /// One-step-ahead forecast of every size (`S × p`, log scale).
    pub fn forecast_one_step<F>(&self, forecaster: &F) -> Result<DMatrix<T>>
    where
        F: ScoreForecaster<T> + ?Sized,
    {
        let common = forecast_columns(&self.common.scores, forecaster)?;
        let specific = self
            .specific
            .par_iter()
            .map(|b| forecast_columns(&b.scores, forecaster))
            .collect::<Result<Vec<_>>>()?;
        self.assemble(&common, &specific)
    }
}

/// Forecasts every column of a score matrix.
pub(crate) fn forecast_columns<T, F>(scores: &DMatrix<T>, forecaster: &F) -> Result<DVector<T>>
where
    T: Real,
    F: ScoreForecaster<T> + ?Sized,
{
    let out = scores
        .column_iter()
        .map(|c| {
            let series: Vec<T> = c.iter().copied().collect();
            forecaster.forecast(&series)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(DVector::from_vec(out))
}

/// Fits the multilevel model with `k` common and `l` size-specific components.
pub fn fit<T: Real>(panel: &FunctionalPanel<T>, k: usize, l: usize) -> Result<MlftsModel<T>> {
    if panel.days() < MIN_CURVES {
        return Err(Error::InsufficientData(format!(
            "MLFTS needs n >= {MIN_CURVES} curves, got {}",
            panel.days()
        )));
    }
    let w = panel.quad_weights();
    let dec = decompose(panel);
    let common = fit_fpca(&dec.common, w, k)?;
    let specific = dec
        .specific
        .par_iter()
        .map(|u| fit_fpca(u, w, l))
        .collect::<Result<Vec<_>>>()?;
    let common_fit = common.fitted();
    let residuals = specific
        .iter()
        .enumerate()
        .map(|(s, b)| {
            let x = panel.size_values(s);
            let spec_fit = b.fitted();
            DMatrix::from_fn(x.nrows(), x.ncols(), |t, j| {
                x[(t, j)] - dec.means[(s, j)] - common_fit[(t, j)] - spec_fit[(t, j)]
            })
        })
        .collect();
    Ok(MlftsModel {
        means: dec.means,
        common,
        specific,
        residuals,
    })
}
