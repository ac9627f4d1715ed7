//! Point and interval accuracy measures on the count scale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mean absolute percentage error over a set of paired values.
///
/// Pairs whose actual value is zero are skipped; the second field counts them.
pub fn mean_ape<T: Real>(actual: &[T], forecast: &[T]) -> Result<(T, usize)> {
    if actual.len() != forecast.len() {
        return Err(Error::Shape(format!(
            "{} actuals vs {} forecasts",
            actual.len(),
            forecast.len()
        )));
    }
    let mut sum = T::zero();
    let mut used = 0;
    for (&a, &f) in actual.iter().zip(forecast) {
        if a != T::zero() {
            sum += ((a - f) / a).abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric(
            "every actual value is zero; MAPE is undefined".into(),
        ));
    }
    Ok((sum / T::from_count(used) * T::lit(100.0), actual.len() - used))
}

/// Pointwise MAPE over days, `S × p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseMape<T: Real> {
    /// NaN where every day had a zero actual.
    pub mape: DMatrix<T>,
    /// Cells skipped because the actual count was zero.
    pub excluded: usize,
}

fn check_days<T: Real>(a: &[DMatrix<T>], b: &[DMatrix<T>]) -> Result<(usize, usize)> {
    let first = a
        .first()
        .ok_or_else(|| Error::InsufficientData("no days to evaluate".into()))?;
    let shape = first.shape();
    if a.len() != b.len() || a.iter().chain(b).any(|m| m.shape() != shape) {
        return Err(Error::Shape("evaluation matrices differ in count or shape".into()));
    }
    Ok(shape)
}

/// `(1/W) Σ_ω |P - P̂| / P × 100` at every `(s, u_j)`.
pub fn mape<T: Real>(actuals: &[DMatrix<T>], forecasts: &[DMatrix<T>]) -> Result<PointwiseMape<T>> {
    let (s_count, p) = check_days(actuals, forecasts)?;
    let mut out = DMatrix::from_element(s_count, p, T::lit(f64::NAN));
    let mut excluded = 0;
    let mut defined = 0;
    for s in 0..s_count {
        for j in 0..p {
            let a: Vec<T> = actuals.iter().map(|m| m[(s, j)]).collect();
            let f: Vec<T> = forecasts.iter().map(|m| m[(s, j)]).collect();
            match mean_ape(&a, &f) {
                Ok((v, ex)) => {
                    out[(s, j)] = v;
                    excluded += ex;
                    defined += 1;
                }
                Err(_) => excluded += a.len(),
            }
        }
    }
    if defined == 0 {
        return Err(Error::UndefinedMetric("all actual counts are zero".into()));
    }
    Ok(PointwiseMape { mape: out, excluded })
}

/// Empirical coverage and its absolute deviation from nominal, each `S × p`.
pub fn ecp_cpd<T: Real>(
    actuals: &[DMatrix<T>],
    lower: &[DMatrix<T>],
    upper: &[DMatrix<T>],
    alpha: T,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let (s_count, p) = check_days(actuals, lower)?;
    check_days(actuals, upper)?;
    let w = T::from_count(actuals.len());
    let nominal = T::one() - alpha;
    let mut ecp = DMatrix::zeros(s_count, p);
    for ((a, lo), up) in actuals.iter().zip(lower).zip(upper) {
        for s in 0..s_count {
            for j in 0..p {
                let x = a[(s, j)];
                if x >= lo[(s, j)] && x <= up[(s, j)] {
                    ecp[(s, j)] += T::one();
                }
            }
        }
    }
    let cpd = ecp.map(|inside: T| (inside - nominal * w).abs() / w);
    ecp /= w;
    Ok((ecp, cpd))
}

/// `(ub - lb) + (2/α)(lb - P)1(P < lb) + (2/α)(P - ub)1(P > ub)`.
pub fn interval_score<T: Real>(lower: T, upper: T, actual: T, alpha: T) -> T {
    let two_over = T::lit(2.0) / alpha;
    let mut score = upper - lower;
    if actual < lower {
        score += two_over * (lower - actual);
    }
    if actual > upper {
        score += two_over * (actual - upper);
    }
    score
}

/// Interval score averaged over days at every `(s, u_j)`.
pub fn mean_interval_score<T: Real>(
    actuals: &[DMatrix<T>],
    lower: &[DMatrix<T>],
    upper: &[DMatrix<T>],
    alpha: T,
) -> Result<DMatrix<T>> {
    let (s_count, p) = check_days(actuals, lower)?;
    check_days(actuals, upper)?;
    let mut out = DMatrix::zeros(s_count, p);
    for ((a, lo), up) in actuals.iter().zip(lower).zip(upper) {
        for s in 0..s_count {
            for j in 0..p {
                out[(s, j)] += interval_score(lo[(s, j)], up[(s, j)], a[(s, j)], alpha);
            }
        }
    }
    Ok(out / T::from_count(actuals.len()))
}

/// Mean of the finite entries of a matrix, NaN if there are none.
pub fn finite_mean<'a, T: Real>(values: impl IntoIterator<Item = &'a T>) -> T {
    let (sum, n) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((T::zero(), 0usize), |(s, n), &v| (s + v, n + 1));
    if n == 0 {
        T::lit(f64::NAN)
    } else {
        sum / T::from_count(n)
    }
}
