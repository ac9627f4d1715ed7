//! Pointwise prediction intervals on the count scale.
//!
//! Two constructions share a store of validation residuals
//! `ξ_ω(u) = P_ω(u) - P̂_ω(u)`: a standard-deviation band `P̂ ± θ δ(u)` with
//! `θ` tuned for empirical coverage, and a split conformal band `P̂ ± q(u)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Step of the θ search grid.
pub const THETA_STEP: f64 = 0.01;
/// Initial upper end of the θ search grid.
pub const THETA_MAX: f64 = 5.0;

/// Validation residuals per size, each `V × p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStore<T: Real> {
    residuals: Vec<DMatrix<T>>,
}

impl<T: Real> ResidualStore<T> {
    pub fn new(residuals: Vec<DMatrix<T>>) -> Result<Self> {
        let first = residuals
            .first()
            .ok_or_else(|| Error::InsufficientData("residual store has no sizes".into()))?;
        let shape = first.shape();
        if shape.0 < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 validation residual curves, got {}",
                shape.0
            )));
        }
        if shape.1 == 0 {
            return Err(Error::Shape("residual curves have no points".into()));
        }
        for (s, r) in residuals.iter().enumerate() {
            if r.shape() != shape {
                return Err(Error::Shape(format!(
                    "size {s} residuals are {:?}, expected {shape:?}",
                    r.shape()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("size {s} has non-finite residuals")));
            }
        }
        Ok(Self { residuals })
    }

    /// Residuals `actual - forecast` from paired `S × p` matrices, one pair per validation curve.
    pub fn from_pairs(actuals: &[DMatrix<T>], forecasts: &[DMatrix<T>]) -> Result<Self> {
        if actuals.len() != forecasts.len() || actuals.is_empty() {
            return Err(Error::Shape(format!(
                "{} actual vs {} forecast curves",
                actuals.len(),
                forecasts.len()
            )));
        }
        let (s_count, p) = actuals[0].shape();
        if actuals
            .iter()
            .zip(forecasts)
            .any(|(a, f)| a.shape() != (s_count, p) || f.shape() != (s_count, p))
        {
            return Err(Error::Shape("residual pairs have inconsistent shapes".into()));
        }
        let v = actuals.len();
        let residuals = (0..s_count)
            .map(|s| DMatrix::from_fn(v, p, |w, j| actuals[w][(s, j)] - forecasts[w][(s, j)]))
            .collect();
        Self::new(residuals)
    }

    pub fn sizes(&self) -> usize {
        self.residuals.len()
    }

    /// Number of validation curves `V`.
    pub fn len(&self) -> usize {
        self.residuals[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> usize {
        self.residuals[0].ncols()
    }

    pub fn size(&self, s: usize) -> &DMatrix<T> {
        &self.residuals[s]
    }

    /// Residuals on grid points `m0..p` only.
    pub fn tail(&self, m0: usize) -> Result<Self> {
        if m0 >= self.points() {
            return Err(Error::OutOfRange {
                index: m0,
                len: self.points(),
            });
        }
        let rest = self.points() - m0;
        Self::new(
            self.residuals
                .iter()
                .map(|r| r.columns(m0, rest).into_owned())
                .collect(),
        )
    }
}

/// `δ^s(u_j)`, the sample sd across validation curves (divisor `V - 1`), `S × p`.
pub fn pointwise_sd<T: Real>(store: &ResidualStore<T>) -> DMatrix<T> {
    let v = T::from_count(store.len());
    let mut out = DMatrix::zeros(store.sizes(), store.points());
    for (s, r) in store.residuals.iter().enumerate() {
        for j in 0..r.ncols() {
            let col = r.column(j);
            let mean = col.sum() / v;
            let ss = col.iter().map(|&x| (x - mean) * (x - mean)).fold(T::zero(), |a, b| a + b);
            out[(s, j)] = (ss / (v - T::one())).sqrt();
        }
    }
    out
}

/// Which residuals share one θ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThetaPooling {
    /// One θ per size from all `(ω, u_j)` pairs.
    #[default]
    Size,
    /// One θ per `(size, u_j)`.
    Point,
}

impl FromStr for ThetaPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "size" => Ok(ThetaPooling::Size),
            "point" => Ok(ThetaPooling::Point),
            other => Err(Error::InvalidArgument(format!(
                "unknown theta pooling '{other}' (expected size or point)"
            ))),
        }
    }
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha < T::one() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn covered<T: Real>(pairs: &[(T, T)], theta: T) -> usize {
    pairs.iter().filter(|(r, d)| *r <= theta * *d).count()
}

/// θ minimising `|coverage(θ) - (1 - α)|` over `{0, 0.01, ...}`; ties go to the smaller θ.
///
/// `pairs` holds `(|ξ|, δ)`. The grid stops at 5 unless that does not reach
/// the nominal coverage, in which case the upper end doubles until it does.
pub fn theta_search<T: Real>(pairs: &[(T, T)], alpha: T) -> T {
    let n = pairs.len();
    let target = T::one() - alpha;
    let nt = T::from_count(n);
    let step = T::lit(THETA_STEP);
    let mut upper = T::lit(THETA_MAX);
    for _ in 0..40 {
        if T::from_count(covered(pairs, upper)) / nt >= target {
            break;
        }
        upper *= T::lit(2.0);
    }
    let steps = (upper / step).to_f64().unwrap_or(0.0).round() as usize;
    // Sorting by ratio makes coverage a cumulative count; comparisons stay direct.
    let mut sorted: Vec<(T, T)> = pairs.to_vec();
    sorted.sort_by(|a, b| ratio(*a).partial_cmp(&ratio(*b)).unwrap_or(std::cmp::Ordering::Equal));
    let mut best = (T::zero(), T::infinity());
    let mut idx = 0;
    let mut count = 0;
    for k in 0..=steps {
        let theta = T::from_count(k) * step;
        while idx < sorted.len() && sorted[idx].0 <= theta * sorted[idx].1 {
            idx += 1;
            count += 1;
        }
        let gap = (T::from_count(count) / nt - target).abs();
        if gap < best.1 {
            best = (theta, gap);
        }
    }
    best.0
}

fn ratio<T: Real>((r, d): (T, T)) -> T {
    if r == T::zero() {
        T::zero()
    } else if d == T::zero() {
        T::infinity()
    } else {
        r / d
    }
}

/// Calibrated `θ^s_α` as an `S × p` matrix (constant across `u` for size
/// pooling) and the sizes whose sd was identically zero.
pub fn calibrate_theta<T: Real>(
    store: &ResidualStore<T>,
    delta: &DMatrix<T>,
    alpha: T,
    pooling: ThetaPooling,
) -> Result<(DMatrix<T>, Vec<usize>)> {
    check_alpha(alpha)?;
    if delta.shape() != (store.sizes(), store.points()) {
        return Err(Error::Shape("delta does not match the residual store".into()));
    }
    let p = store.points();
    let mut theta = DMatrix::zeros(store.sizes(), p);
    let mut degenerate = Vec::new();
    for (s, r) in store.residuals.iter().enumerate() {
        if delta.row(s).iter().all(|&d| d == T::zero()) {
            warn!("size {s}: residual sd is zero everywhere; theta set to 0");
            degenerate.push(s);
            continue;
        }
        match pooling {
            ThetaPooling::Size => {
                let pairs: Vec<(T, T)> = (0..p)
                    .flat_map(|j| r.column(j).iter().map(move |&x| (x.abs(), delta[(s, j)])).collect::<Vec<_>>())
                    .collect();
                let t = theta_search(&pairs, alpha);
                theta.row_mut(s).fill(t);
            }
            ThetaPooling::Point => {
                for j in 0..p {
                    let pairs: Vec<(T, T)> = r.column(j).iter().map(|&x| (x.abs(), delta[(s, j)])).collect();
                    theta[(s, j)] = theta_search(&pairs, alpha);
                }
            }
        }
    }
    Ok((theta, degenerate))
}

/// Split conformal rank `⌈(1-α)(V+1)⌉`, capped at `V`.
pub fn conformal_rank<T: Real>(v: usize, alpha: T) -> usize {
    let raw = ((T::one() - alpha).as_f64() * (v as f64 + 1.0) - 1e-9).ceil();
    (raw.max(1.0) as usize).min(v)
}

/// `q^s_α(u_j)`: the conformal-rank smallest `|ξ|` across curves, `S × p`.
pub fn conformal_quantile<T: Real>(store: &ResidualStore<T>, alpha: T) -> Result<DMatrix<T>> {
    check_alpha(alpha)?;
    let v = store.len();
    if (v as f64) < (1.0 / alpha.as_f64()).ceil() {
        log::debug!("only {v} validation curves for alpha = {alpha}; conformal quantile falls back to the maximum");
    }
    let rank = conformal_rank(v, alpha);
    let mut out = DMatrix::zeros(store.sizes(), store.points());
    for (s, r) in store.residuals.iter().enumerate() {
        for j in 0..r.ncols() {
            let mut mags: Vec<T> = r.column(j).iter().map(|x| x.abs()).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[(s, j)] = mags[rank - 1];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntervalMethod {
    Sd,
    Conformal,
}

impl IntervalMethod {
    pub fn code(&self) -> &'static str {
        match self {
            IntervalMethod::Sd => "sd",
            IntervalMethod::Conformal => "conformal",
        }
    }
}

impl fmt::Display for IntervalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for IntervalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sd" => Ok(IntervalMethod::Sd),
            "conformal" | "cp" => Ok(IntervalMethod::Conformal),
            other => Err(Error::InvalidArgument(format!(
                "unknown interval method '{other}' (expected sd or conformal)"
            ))),
        }
    }
}

/// Everything needed to build intervals at one α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalCalibration<T: Real> {
    pub alpha: T,
    /// `S × p` pointwise sd.
    pub delta: DMatrix<T>,
    /// `S × p` θ (rows constant under size pooling).
    pub theta: DMatrix<T>,
    /// `S × p` conformal quantile.
    pub q_alpha: DMatrix<T>,
    /// Sizes whose θ fell back to 0.
    pub degenerate: Vec<usize>,
}

impl<T: Real> IntervalCalibration<T> {
    pub fn fit(store: &ResidualStore<T>, alpha: T, pooling: ThetaPooling) -> Result<Self> {
        let delta = pointwise_sd(store);
        let (theta, degenerate) = calibrate_theta(store, &delta, alpha, pooling)?;
        let q_alpha = conformal_quantile(store, alpha)?;
        Ok(Self {
            alpha,
            delta,
            theta,
            q_alpha,
            degenerate,
        })
    }

    pub fn sizes(&self) -> usize {
        self.delta.nrows()
    }

    pub fn points(&self) -> usize {
        self.delta.ncols()
    }

    /// Half-widths for a method, `S × p`.
    pub fn half_width(&self, method: IntervalMethod) -> DMatrix<T> {
        match method {
            IntervalMethod::Sd => self.theta.component_mul(&self.delta),
            IntervalMethod::Conformal => self.q_alpha.clone(),
        }
    }
}

/// Lower and upper bounds, `S × p` on the count scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval<T: Real> {
    pub lower: DMatrix<T>,
    pub upper: DMatrix<T>,
}

/// `[P̂ - h, P̂ + h]` with `h = θδ` or `q`; lower bounds are clamped at 0.
pub fn build_interval<T: Real>(
    point: &DMatrix<T>,
    calibration: &IntervalCalibration<T>,
    method: IntervalMethod,
    alpha: T,
) -> Result<Interval<T>> {
    if (calibration.alpha - alpha).abs() > T::lit(1e-12) {
        return Err(Error::InvalidArgument(format!(
            "calibration is for alpha = {}, requested {alpha}",
            calibration.alpha
        )));
    }
    if point.shape() != calibration.delta.shape() {
        return Err(Error::Shape(format!(
            "forecast is {:?}, calibration is {:?}",
            point.shape(),
            calibration.delta.shape()
        )));
    }
    let h = calibration.half_width(method);
    let lower = point.zip_map(&h, |p, h| {
        let lo = p - h;
        if lo < T::zero() {
            T::zero()
        } else {
            lo
        }
    });
    let upper = point + h;
    Ok(Interval { lower, upper })
}

/// Intervals for an updated forecast `S × (p - m0)` from the updating method's
/// validation residuals on the remaining grid, keyed by `m0`.
pub fn update_intervals<T: Real>(
    point: &DMatrix<T>,
    stores: &BTreeMap<usize, ResidualStore<T>>,
    m0: usize,
    alpha: T,
    method: IntervalMethod,
    pooling: ThetaPooling,
) -> Result<Interval<T>> {
    let store = stores
        .get(&m0)
        .ok_or_else(|| Error::InvalidArgument(format!("no updating residuals stored for m0 = {m0}")))?;
    let cal = IntervalCalibration::fit(store, alpha, pooling)?;
    build_interval(point, &cal, method, alpha)
}

/// Column suffix for a level: `0.2` gives `80`.
pub fn level_label<T: Real>(alpha: T) -> String {
    let pct = (1.0 - alpha.as_f64()) * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

/// `size,u,delta,q<L>...,theta<L>...` with one `q`/`theta` column per calibration.
pub fn write_calibrations<T: Real, W: Write>(
    w: W,
    calibrations: &[IntervalCalibration<T>],
    size_labels: &[f64],
) -> Result<()> {
    let first = calibrations
        .first()
        .ok_or_else(|| Error::InvalidArgument("no calibrations to write".into()))?;
    if size_labels.len() != first.sizes() || calibrations.iter().any(|c| c.delta.shape() != first.delta.shape()) {
        return Err(Error::Shape("calibrations and size labels disagree".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["size".to_string(), "u".to_string(), "delta".to_string()];
    header.extend(calibrations.iter().map(|c| format!("q{}", level_label(c.alpha))));
    header.extend(calibrations.iter().map(|c| format!("theta{}", level_label(c.alpha))));
    wtr.write_record(&header)?;
    for (s, label) in size_labels.iter().enumerate() {
        for j in 0..first.points() {
            let mut row = vec![label.to_string(), j.to_string(), first.delta[(s, j)].to_string()];
            row.extend(calibrations.iter().map(|c| c.q_alpha[(s, j)].to_string()));
            row.extend(calibrations.iter().map(|c| c.theta[(s, j)].to_string()));
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a calibration file back; returns the size labels and one calibration per level.
pub fn read_calibrations<R: Read>(r: R) -> Result<(Vec<f64>, Vec<IntervalCalibration<f64>>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let levels: Vec<(usize, f64)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix('q').and_then(|l| l.parse::<f64>().ok()).map(|l| (i, l)))
        .collect();
    if header.get(0) != Some("size") || header.get(2) != Some("delta") || levels.is_empty() {
        return Err(Error::Ingest("calibration header must be size,u,delta,q..,theta..".into()));
    }
    let theta_cols: Vec<usize> = levels
        .iter()
        .map(|(_, l)| {
            header
                .iter()
                .position(|h| h.strip_prefix("theta").and_then(|x| x.parse::<f64>().ok()) == Some(*l))
                .ok_or_else(|| Error::Ingest(format!("missing theta column for level {l}")))
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<(f64, usize, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Ingest(format!("bad calibration row {rec:?}")))
        };
        let vals = (0..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        rows.push((vals[0], vals[1] as usize, vals));
    }
    let mut labels: Vec<f64> = Vec::new();
    for (l, _, _) in &rows {
        if labels.last() != Some(l) {
            labels.push(*l);
        }
    }
    let p = rows.iter().map(|r| r.1).max().map_or(0, |m| m + 1);
    if rows.len() != labels.len() * p {
        return Err(Error::Ingest("calibration file is not a full size × u grid".into()));
    }
    let at = |col: usize| DMatrix::from_fn(labels.len(), p, |s, j| rows[s * p + j].2[col]);
    let delta = at(2);
    let cals = levels
        .iter()
        .zip(&theta_cols)
        .map(|(&(qc, l), &tc)| IntervalCalibration {
            alpha: 1.0 - l / 100.0,
            delta: delta.clone(),
            theta: at(tc),
            q_alpha: at(qc),
            degenerate: Vec::new(),
        })
        .collect();
    Ok((labels, cals))
}
