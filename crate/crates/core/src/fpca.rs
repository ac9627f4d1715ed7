//! Functional principal component analysis on a quadrature grid.
//!
//! Curves are rows of an `n × p` matrix. With weights `w`, the covariance
//! operator is discretised as `C W` and its eigenfunctions are normalised so
//! that `φᵀ W φ = 1`. The symmetric problem is solved on `Y = (X - mean) W^{1/2}`
//! through whichever of `YᵀY/n` (p × p) or `YYᵀ/n` (n × n) is smaller.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fix_signs, numerical_rank, symmetric_eigen_desc};
use crate::panel::FunctionalPanel;
use crate::scalar::Real;

/// Mean function, eigenfunctions, eigenvalues and scores of one series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FpcaBasis<T: Real> {
    pub mean: DVector<T>,
    /// `p × K`, column `k` is eigenfunction `k` on the grid.
    pub components: DMatrix<T>,
    /// Non-increasing, length `K`.
    pub eigenvalues: DVector<T>,
    /// `n × K` principal component scores.
    pub scores: DMatrix<T>,
    /// Number of components asked for; larger than `K` when truncated to rank.
    pub requested: usize,
}

impl<T: Real> FpcaBasis<T> {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    pub fn truncated(&self) -> bool {
        self.requested > self.n_components()
    }

    /// Mean plus the truncated Karhunen–Loève sum for curve `t`.
    pub fn reconstruct(&self, t: usize) -> Result<DVector<T>> {
        if t >= self.scores.nrows() {
            return Err(Error::OutOfRange {
                index: t,
                len: self.scores.nrows(),
            });
        }
        Ok(self.curve_from_scores(&self.scores.row(t).transpose()))
    }

    /// Mean plus `Σ_k scores[k] φ_k`.
    pub fn curve_from_scores(&self, scores: &DVector<T>) -> DVector<T> {
        &self.mean + &self.components * scores
    }

    /// Every fitted curve, `n × p`.
    pub fn fitted(&self) -> DMatrix<T> {
        let mut out = &self.scores * self.components.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }

    /// Keeps only the first `k` components.
    pub fn leading(&self, k: usize) -> FpcaBasis<T> {
        let k = k.min(self.n_components());
        FpcaBasis {
            mean: self.mean.clone(),
            components: self.components.columns(0, k).into_owned(),
            eigenvalues: self.eigenvalues.rows(0, k).into_owned(),
            scores: self.scores.columns(0, k).into_owned(),
            requested: k,
        }
    }
}

fn validate_weights<T: Real>(p: usize, weights: &[T]) -> Result<()> {
    if weights.len() != p {
        return Err(Error::Shape(format!(
            "{} quadrature weights for {} grid points",
            weights.len(),
            p
        )));
    }
    if weights.iter().any(|w| !(*w > T::zero())) {
        return Err(Error::InvalidArgument("quadrature weights must be positive".into()));
    }
    Ok(())
}

/// FPCA of the rows of `curves` keeping up to `k` components.
///
/// `k` beyond the numerical rank of the centred data is truncated with a
/// warning. Each eigenfunction is signed so its largest-magnitude entry is
/// positive.
pub fn fit_fpca<T: Real>(curves: &DMatrix<T>, weights: &[T], k: usize) -> Result<FpcaBasis<T>> {
    let (n, p) = curves.shape();
    if n < 2 {
        return Err(Error::InsufficientData(format!("FPCA needs n >= 2 curves, got {n}")));
    }
    validate_weights(p, weights)?;
    let nt = T::from_count(n);
    let mean = DVector::from_iterator(p, curves.column_iter().map(|c| c.sum() / nt));
    let sqrt_w: Vec<T> = weights.iter().map(|w| w.sqrt()).collect();
    let y = DMatrix::from_fn(n, p, |t, j| (curves[(t, j)] - mean[j]) * sqrt_w[j]);

    // Magnitude of the raw curves, used to decide what counts as a zero eigenvalue.
    let raw_scale = curves
        .row_iter()
        .map(|r| {
            r.iter()
                .zip(weights)
                .fold(T::zero(), |acc, (&x, &w)| acc + w * x * x)
        })
        .fold(T::zero(), |a, b| a + b)
        / nt;

    let (values, psi) = if n < p {
        let gram = (&y * y.transpose()) / nt;
        let eig = symmetric_eigen_desc(gram);
        let rank = numerical_rank(&eig.values, raw_scale.max(eig.values[0]));
        let kk = k.min(rank).min(n - 1);
        let mut psi = DMatrix::zeros(p, kk);
        for i in 0..kk {
            let v = eig.vectors.column(i);
            let col = y.transpose() * v / (nt * eig.values[i]).sqrt();
            psi.set_column(i, &col);
        }
        (eig.values.rows(0, kk).into_owned(), psi)
    } else {
        let cov = (y.transpose() * &y) / nt;
        let eig = symmetric_eigen_desc(cov);
        let rank = numerical_rank(&eig.values, raw_scale.max(eig.values[0]));
        let kk = k.min(rank).min(n - 1);
        (
            eig.values.rows(0, kk).into_owned(),
            eig.vectors.columns(0, kk).into_owned(),
        )
    };
    let kk = values.len();
    if kk < k {
        log::warn!("FPCA: {k} components requested, data rank supports {kk}; truncating");
    }
    let mut components = DMatrix::from_fn(p, kk, |j, i| psi[(j, i)] / sqrt_w[j]);
    let signs = fix_signs(&mut components);
    let mut psi = psi;
    for (i, s) in signs.iter().enumerate() {
        if *s < T::zero() {
            psi.column_mut(i).neg_mut();
        }
    }
    let scores = &y * &psi;
    Ok(FpcaBasis {
        mean,
        components,
        eigenvalues: values,
        scores,
        requested: k,
    })
}

/// FPCA of the stacked `(S·p)`-vectors of a panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StackedBasis<T: Real> {
    /// Length `S·p`; block `s` is size `s`'s mean curve.
    pub mean: DVector<T>,
    /// `(S·p) × N`.
    pub components: DMatrix<T>,
    pub eigenvalues: DVector<T>,
    /// `N × n`.
    pub scores: DMatrix<T>,
    pub points: usize,
}

impl<T: Real> StackedBasis<T> {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// Rows of the mean and components belonging to size `s`.
    pub fn block(&self, s: usize) -> (DVector<T>, DMatrix<T>) {
        let p = self.points;
        (
            self.mean.rows(s * p, p).into_owned(),
            self.components.rows(s * p, p).into_owned(),
        )
    }

    /// Score series of component `i` across the `n` curves.
    pub fn score_series(&self, i: usize) -> Vec<T> {
        self.scores.row(i).iter().copied().collect()
    }
}

/// Multivariate FPCA on stacked curves; every block uses the panel's weights.
pub fn fit_stacked<T: Real>(panel: &FunctionalPanel<T>, n_components: usize) -> Result<StackedBasis<T>> {
    let stacked = panel.stacked();
    let weights: Vec<T> = (0..panel.sizes())
        .flat_map(|_| panel.quad_weights().iter().copied())
        .collect();
    let basis = fit_fpca(&stacked, &weights, n_components)?;
    Ok(StackedBasis {
        mean: basis.mean,
        components: basis.components,
        eigenvalues: basis.eigenvalues,
        scores: basis.scores.transpose(),
        points: panel.points(),
    })
}
