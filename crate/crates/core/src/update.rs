//! Dynamic updating of the forecast for the rest of a partially observed curve.
//!
//! Once the first `m0` points of curve `n+1` are known, the remaining points
//! `m0+1..p` can be re-forecast either by block moving (shift curve boundaries
//! so the partial curve completes the latest block) or by regressing the
//! observed segment on the leading rows of a stacked multivariate FPCA basis.
//! The regression coefficients are estimated by ordinary least squares, ridge
//! (shrunk towards zero) or penalised least squares (shrunk towards the
//! time-series forecast of the scores).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpca::{fit_stacked, StackedBasis};
use crate::linalg::symmetric_eigen_desc;
use crate::model::PointModel;
use crate::panel::{inverse_transform, FunctionalPanel, PartialDay, Segmentation, MIN_CURVES};
use crate::scalar::Real;
use crate::scorets::ScoreForecaster;

/// Retained stacked components used by the regression updates.
pub const DEFAULT_STACKED_COMPONENTS: usize = 6;

/// `{0} ∪ {10^-4, ..., 10^4}` with 33 log-spaced points.
pub fn default_lambda_grid<T: Real>() -> Vec<T> {
    let mut grid = vec![T::zero()];
    grid.extend((0..33).map(|i| T::lit(10f64.powf(-4.0 + 8.0 * i as f64 / 32.0))));
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UpdateMethod {
    BlockMoving,
    Ols,
    Ridge,
    Pls,
}

impl UpdateMethod {
    pub const ALL: [UpdateMethod; 4] = [
        UpdateMethod::BlockMoving,
        UpdateMethod::Ols,
        UpdateMethod::Ridge,
        UpdateMethod::Pls,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            UpdateMethod::BlockMoving => "bm",
            UpdateMethod::Ols => "ols",
            UpdateMethod::Ridge => "ridge",
            UpdateMethod::Pls => "pls",
        }
    }

    /// Whether the method has a shrinkage parameter to tune.
    pub fn is_shrinkage(&self) -> bool {
        matches!(self, UpdateMethod::Ridge | UpdateMethod::Pls)
    }
}

impl fmt::Display for UpdateMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for UpdateMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bm" | "block-moving" => Ok(UpdateMethod::BlockMoving),
            "ols" => Ok(UpdateMethod::Ols),
            "ridge" | "rr" => Ok(UpdateMethod::Ridge),
            "pls" => Ok(UpdateMethod::Pls),
            other => Err(Error::InvalidArgument(format!(
                "unknown update method '{other}' (expected bm, ols, ridge or pls)"
            ))),
        }
    }
}

/// Regression update for one size.
#[derive(Debug, Clone)]
pub struct UpdateProblem<T: Real> {
    /// Size mean on the full grid.
    pub mean: DVector<T>,
    /// `p × N` basis rows of this size.
    pub components: DMatrix<T>,
    pub observed: PartialDay<T>,
    /// Time-series forecasts of the `N` scores.
    pub ts_scores: DVector<T>,
    pub lambda: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult<T: Real> {
    pub coefficients: DVector<T>,
    /// Forecast for grid points `m0+1..p` (log scale).
    pub forecast: DVector<T>,
}

impl<T: Real> UpdateProblem<T> {
    pub fn new(
        mean: DVector<T>,
        components: DMatrix<T>,
        observed: PartialDay<T>,
        ts_scores: DVector<T>,
        lambda: T,
    ) -> Result<Self> {
        let (p, n_comp) = components.shape();
        if n_comp == 0 {
            return Err(Error::InvalidArgument("update basis has no components".into()));
        }
        if mean.len() != p || observed.m0() >= p {
            return Err(Error::Shape(format!(
                "mean length {} / m0 {} inconsistent with p = {p}",
                mean.len(),
                observed.m0()
            )));
        }
        if ts_scores.len() != n_comp {
            return Err(Error::Shape(format!(
                "{} TS scores for {n_comp} components",
                ts_scores.len()
            )));
        }
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self {
            mean,
            components,
            observed,
            ts_scores,
            lambda,
        })
    }

    /// Problem for size `s` of a stacked basis.
    pub fn from_stacked(
        basis: &StackedBasis<T>,
        s: usize,
        observed: PartialDay<T>,
        ts_scores: DVector<T>,
        lambda: T,
    ) -> Result<Self> {
        if (s + 1) * basis.points > basis.mean.len() {
            return Err(Error::OutOfRange {
                index: s,
                len: basis.mean.len() / basis.points,
            });
        }
        let (mean, components) = basis.block(s);
        Self::new(mean, components, observed, ts_scores, lambda)
    }

    pub fn with_lambda(&self, lambda: T) -> Result<Self> {
        Self::new(
            self.mean.clone(),
            self.components.clone(),
            self.observed.clone(),
            self.ts_scores.clone(),
            lambda,
        )
    }

    pub fn m0(&self) -> usize {
        self.observed.m0()
    }

    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    /// `ℱ_e`, the first `m0` basis rows.
    pub fn design(&self) -> DMatrix<T> {
        self.components.rows(0, self.m0()).into_owned()
    }

    /// Mean-adjusted observations.
    pub fn response(&self) -> DVector<T> {
        let m0 = self.m0();
        DVector::from_iterator(
            m0,
            self.observed
                .observed()
                .iter()
                .zip(self.mean.iter())
                .map(|(&x, &m)| x - m),
        )
    }

    /// `μ(u_l) + Σ_i β_i φ_i(u_l)` for `l = m0+1..p`.
    pub fn remaining_forecast(&self, coefficients: &DVector<T>) -> DVector<T> {
        let m0 = self.m0();
        let rest = self.components.nrows() - m0;
        self.mean.rows(m0, rest) + self.components.rows(m0, rest) * coefficients
    }

    fn solve(&self, lambda: T, target: Option<&DVector<T>>) -> Result<UpdateResult<T>> {
        let fe = self.design();
        let mut a = fe.transpose() * &fe;
        let mut b = fe.transpose() * self.response();
        if lambda == T::zero() {
            check_well_posed(&a, self.m0())?;
        } else {
            for i in 0..a.nrows() {
                a[(i, i)] += lambda;
            }
            if let Some(t) = target {
                b += t * lambda;
            }
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("m0 = {}, lambda = {lambda}", self.m0())))?;
        let coefficients = chol.solve(&b);
        let forecast = self.remaining_forecast(&coefficients);
        Ok(UpdateResult {
            coefficients,
            forecast,
        })
    }
}

fn check_well_posed<T: Real>(a: &DMatrix<T>, m0: usize) -> Result<()> {
    let n = a.nrows();
    if m0 < n {
        return Err(Error::Singular(format!(
            "{m0} observations for {n} coefficients"
        )));
    }
    let eig = symmetric_eigen_desc(a.clone());
    let max = eig.values[0];
    let min = eig.values[n - 1];
    if !(max > T::zero()) || min <= crate::scalar::rank_tolerance::<T>() * max {
        return Err(Error::Singular(format!(
            "normal matrix is rank deficient at m0 = {m0}"
        )));
    }
    Ok(())
}

/// `β = (ℱ_eᵀℱ_e)⁻¹ ℱ_eᵀ x*`.
pub fn ols_update<T: Real>(problem: &UpdateProblem<T>) -> Result<UpdateResult<T>> {
    problem.solve(T::zero(), None)
}

/// `β = (ℱ_eᵀℱ_e + λI)⁻¹ ℱ_eᵀ x*`; equals OLS at `λ = 0`.
pub fn ridge_update<T: Real>(problem: &UpdateProblem<T>) -> Result<UpdateResult<T>> {
    problem.solve(problem.lambda, None)
}

/// `β = (ℱ_eᵀℱ_e + λI)⁻¹ (ℱ_eᵀ x* + λ β_TS)`; equals OLS at `λ = 0`.
pub fn pls_update<T: Real>(problem: &UpdateProblem<T>) -> Result<UpdateResult<T>> {
    problem.solve(problem.lambda, Some(&problem.ts_scores))
}

/// One-step forecasts of every stacked score series.
pub fn ts_score_forecasts<T, F>(basis: &StackedBasis<T>, forecaster: &F) -> Result<DVector<T>>
where
    T: Real,
    F: ScoreForecaster<T> + ?Sized,
{
    let out = (0..basis.n_components())
        .map(|i| forecaster.forecast(&basis.score_series(i)))
        .collect::<Result<Vec<T>>>()?;
    Ok(DVector::from_vec(out))
}

/// Regression update of every size. `observed` is `S × m0` (log scale);
/// the result is `S × (p - m0)`.
pub fn regression_update<T: Real>(
    method: UpdateMethod,
    basis: &StackedBasis<T>,
    ts_scores: &DVector<T>,
    observed: &DMatrix<T>,
    lambda: T,
) -> Result<DMatrix<T>> {
    let p = basis.points;
    let (s_count, m0) = observed.shape();
    let mut out = DMatrix::zeros(s_count, p - m0.min(p));
    for s in 0..s_count {
        let partial = PartialDay::new(observed.row(s).iter().copied().collect(), p)?;
        let problem = UpdateProblem::from_stacked(basis, s, partial, ts_scores.clone(), lambda)?;
        let res = match method {
            UpdateMethod::Ols => ols_update(&problem),
            UpdateMethod::Ridge => ridge_update(&problem),
            UpdateMethod::Pls => pls_update(&problem),
            UpdateMethod::BlockMoving => {
                return Err(Error::InvalidArgument(
                    "block moving is not a regression update".into(),
                ))
            }
        }?;
        out.set_row(s, &res.forecast.transpose());
    }
    Ok(out)
}

/// Shifts curve boundaries to just after point `m0`.
///
/// Re-blocked curve `i` is the tail `m0+1..p` of curve `i` followed by the
/// head `1..m0` of curve `i+1`; the final curve ends with the partial
/// observations (`S × m0`). The head of the first curve is dropped.
pub fn reblock<T: Real>(history: &FunctionalPanel<T>, partial: &DMatrix<T>) -> Result<FunctionalPanel<T>> {
    let (n, p, s_count) = (history.days(), history.points(), history.sizes());
    let m0 = partial.ncols();
    if m0 == 0 {
        return Err(Error::InvalidArgument(
            "block moving needs m0 >= 1; use the plain one-step forecast".into(),
        ));
    }
    if m0 >= p || partial.nrows() != s_count {
        return Err(Error::Shape(format!(
            "partial day is {}×{m0}, expected {s_count}×m0 with m0 < {p}",
            partial.nrows()
        )));
    }
    let tail = p - m0;
    let values = (0..s_count)
        .map(|s| {
            let x = history.size_values(s);
            DMatrix::from_fn(n, p, |i, j| {
                if j < tail {
                    x[(i, m0 + j)]
                } else if i + 1 < n {
                    x[(i + 1, j - tail)]
                } else {
                    partial[(s, j - tail)]
                }
            })
        })
        .collect();
    FunctionalPanel::new(values, history.size_labels().to_vec(), Segmentation::Other)
}

/// Block-moving forecast of points `m0+1..p` of the next curve, `S × (p - m0)`.
pub fn block_moving_forecast<T, F>(
    history: &FunctionalPanel<T>,
    partial: &DMatrix<T>,
    model: &PointModel,
    forecaster: &F,
) -> Result<DMatrix<T>>
where
    T: Real,
    F: ScoreForecaster<T> + ?Sized,
{
    let shifted = reblock(history, partial)?;
    if shifted.days() < MIN_CURVES {
        return Err(Error::InsufficientData(format!(
            "block moving needs {MIN_CURVES} re-blocked curves, got {}",
            shifted.days()
        )));
    }
    let next = model.forecast(&shifted, forecaster)?;
    let tail = history.points() - partial.ncols();
    Ok(next.columns(0, tail).into_owned())
}

/// Shrinkage method whose λ is tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ShrinkageMethod {
    Ridge,
    Pls,
}

impl ShrinkageMethod {
    pub fn update_method(&self) -> UpdateMethod {
        match self {
            ShrinkageMethod::Ridge => UpdateMethod::Ridge,
            ShrinkageMethod::Pls => UpdateMethod::Pls,
        }
    }

    pub fn code(&self) -> &'static str {
        self.update_method().code()
    }
}

impl FromStr for ShrinkageMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<UpdateMethod>()? {
            UpdateMethod::Ridge => Ok(ShrinkageMethod::Ridge),
            UpdateMethod::Pls => Ok(ShrinkageMethod::Pls),
            other => Err(Error::InvalidArgument(format!("{other} has no shrinkage parameter"))),
        }
    }
}

/// A validation curve with the basis and TS score forecasts fitted on its past.
#[derive(Debug, Clone)]
pub struct ValidationCase<T: Real> {
    pub basis: StackedBasis<T>,
    pub ts_scores: DVector<T>,
    /// `S × p` log-scale values fed to the regression as the observed part.
    pub observed: DMatrix<T>,
    /// `S × p` log-scale values the updated forecast is scored against.
    pub actual: DMatrix<T>,
}

/// Validation cases for curves `start..end` (0-based), each fitted on all earlier curves.
pub fn build_validation_cases<T, F>(
    panel: &FunctionalPanel<T>,
    start: usize,
    end: usize,
    n_components: usize,
    forecaster: &F,
) -> Result<Vec<ValidationCase<T>>>
where
    T: Real,
    F: ScoreForecaster<T> + ?Sized,
{
    if start < 2 || end > panel.days() || start >= end {
        return Err(Error::InvalidArgument(format!(
            "validation range {start}..{end} invalid for {} curves",
            panel.days()
        )));
    }
    (start..end)
        .into_par_iter()
        .map(|w| {
            let history = panel.head(w)?;
            let basis = fit_stacked(&history, n_components)?;
            let ts_scores = ts_score_forecasts(&basis, forecaster)?;
            let day = panel.day(w);
            Ok(ValidationCase {
                basis,
                ts_scores,
                observed: day.clone(),
                actual: day,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Window {
            index: start,
            source: Box::new(e),
        })
}

/// Sum and count of absolute percentage errors on the count scale.
///
/// Cells whose actual count is zero are skipped.
pub(crate) fn ape_sum<T: Real>(actual_log: &[T], forecast_log: &[T]) -> (T, usize) {
    let hundred = T::lit(100.0);
    let mut sum = T::zero();
    let mut count = 0;
    for (&a, &f) in actual_log.iter().zip(forecast_log) {
        let (pa, _) = inverse_transform(a);
        let (pf, _) = inverse_transform(f);
        if pa > T::zero() {
            sum += (pa - pf).abs() / pa * hundred;
            count += 1;
        }
    }
    (sum, count)
}

/// Validation MAPE of one shrinkage method at one `(m0, λ)`; `None` if the
/// estimator is not defined there.
pub fn validation_mape<T: Real>(
    cases: &[ValidationCase<T>],
    method: ShrinkageMethod,
    m0: usize,
    lambda: T,
) -> Option<T> {
    let mut sum = T::zero();
    let mut count = 0;
    for case in cases {
        let observed = case.observed.columns(0, m0).into_owned();
        let fc = regression_update(method.update_method(), &case.basis, &case.ts_scores, &observed, lambda)
            .ok()?;
        for s in 0..fc.nrows() {
            let actual: Vec<T> = case.actual.row(s).iter().skip(m0).copied().collect();
            let pred: Vec<T> = fc.row(s).iter().copied().collect();
            let (a, c) = ape_sum(&actual, &pred);
            sum += a;
            count += c;
        }
    }
    (count > 0).then(|| sum / T::from_count(count))
}

/// Optimal λ for every `m0 = 1..p-1` (index `m0 - 1`), by minimum validation
/// MAPE averaged over cases, sizes and remaining points. Ties go to the
/// smaller λ.
pub fn select_lambda<T: Real>(
    cases: &[ValidationCase<T>],
    method: ShrinkageMethod,
    grid: &[T],
) -> Result<Vec<T>> {
    let first = cases
        .first()
        .ok_or_else(|| Error::InsufficientData("no validation cases".into()))?;
    let all: Vec<usize> = (1..first.basis.points).collect();
    select_lambda_at(cases, method, grid, &all)
}

/// As [`select_lambda`] for the listed `m0` values only; output follows `m0s`.
pub fn select_lambda_at<T: Real>(
    cases: &[ValidationCase<T>],
    method: ShrinkageMethod,
    grid: &[T],
    m0s: &[usize],
) -> Result<Vec<T>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !(*l >= T::zero())) {
        return Err(Error::InvalidArgument("lambda grid values must be >= 0".into()));
    }
    let first = cases
        .first()
        .ok_or_else(|| Error::InsufficientData("no validation cases".into()))?;
    let p = first.basis.points;
    if let Some(&bad) = m0s.iter().find(|&&m| m == 0 || m >= p) {
        return Err(Error::OutOfRange { index: bad, len: p });
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    m0s.par_iter()
        .map(|&m0| {
            let mut best: Option<(T, T)> = None;
            for &lambda in &sorted {
                if let Some(err) = validation_mape(cases, method, m0, lambda) {
                    if best.is_none_or(|(_, e)| err < e) {
                        best = Some((lambda, err));
                    }
                }
            }
            best.map(|(l, _)| l).ok_or_else(|| {
                Error::Numerical(format!("no lambda in the grid gives a defined update at m0 = {m0}"))
            })
        })
        .collect()
}

/// Selected λ per `(label, m0, method)`; labels are weekday codes or `all`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule<T> {
    entries: BTreeMap<(String, usize, String), T>,
}

impl<T: Real> LambdaSchedule<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, label: &str, m0: usize, method: ShrinkageMethod, lambda: T) -> Result<()> {
        if !(lambda >= T::zero()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
        }
        self.entries
            .insert((label.to_string(), m0, method.code().to_string()), lambda);
        Ok(())
    }

    /// Inserts `lambdas[m0 - 1]` for every `m0`.
    pub fn insert_all(&mut self, label: &str, method: ShrinkageMethod, lambdas: &[T]) -> Result<()> {
        for (i, &l) in lambdas.iter().enumerate() {
            self.insert(label, i + 1, method, l)?;
        }
        Ok(())
    }

    pub fn get(&self, label: &str, m0: usize, method: ShrinkageMethod) -> Option<T> {
        self.entries
            .get(&(label.to_string(), m0, method.code().to_string()))
            .copied()
    }

    /// Adds every entry of `other`, replacing duplicates.
    pub fn merge(&mut self, other: LambdaSchedule<T>) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `weekday,m0,method,lambda`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["weekday", "m0", "method", "lambda"])?;
        for ((label, m0, method), lambda) in &self.entries {
            wtr.write_record([label.clone(), m0.to_string(), method.clone(), lambda.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

impl LambdaSchedule<f64> {
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut out = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = || Error::Ingest(format!("bad lambda schedule row {rec:?}"));
            let m0: usize = rec.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let method: ShrinkageMethod = rec.get(2).ok_or_else(bad)?.parse()?;
            let lambda: f64 = rec.get(3).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            out.insert(rec.get(0).ok_or_else(bad)?, m0, method, lambda)?;
        }
        Ok(out)
    }
}
