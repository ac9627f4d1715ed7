//! Univariate exponential smoothing for principal-component scores and factors.
//!
//! Simple exponential smoothing and Holt's linear trend are both fitted by
//! minimising the in-sample sum of squared one-step errors; the one with the
//! lower AICc supplies the forecast.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// One-step-ahead forecaster for a scalar series.
pub trait ScoreForecaster<T>: Sync {
    fn forecast(&self, series: &[T]) -> Result<T>;
}

impl<T, F> ScoreForecaster<T> for F
where
    F: Fn(&[T]) -> Result<T> + Sync,
{
    fn forecast(&self, series: &[T]) -> Result<T> {
        self(series)
    }
}

/// Automatic SES/Holt selection by AICc.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpSmoothing;

impl<T: Real> ScoreForecaster<T> for ExpSmoothing {
    fn forecast(&self, series: &[T]) -> Result<T> {
        fit_forecast(series).map(|fit| fit.forecast)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmoothingMethod {
    Ses,
    Holt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmoothingFit<T> {
    pub method: SmoothingMethod,
    pub alpha: T,
    pub beta: Option<T>,
    pub level: T,
    pub trend: Option<T>,
    pub sse: T,
    pub aicc: T,
    pub forecast: T,
}

const SES_GRID_STEPS: usize = 100;
const HOLT_GRID_STEPS: usize = 20;
const GOLDEN_ITERS: usize = 40;
const HOLT_SWEEPS: usize = 3;

/// Final level and one-step SSE of SES; the level starts at the first value.
fn ses_pass<T: Real>(y: &[T], alpha: T) -> (T, T) {
    let mut level = y[0];
    let mut sse = T::zero();
    for &v in &y[1..] {
        let e = v - level;
        sse += e * e;
        level += alpha * e;
    }
    (level, sse)
}

/// Final level, trend and one-step SSE of Holt's method. The level starts at
/// the first value and the trend at the first difference.
fn holt_pass<T: Real>(y: &[T], alpha: T, beta: T) -> (T, T, T) {
    let mut level = y[0];
    let mut trend = y[1] - y[0];
    let mut sse = T::zero();
    for &v in &y[1..] {
        let pred = level + trend;
        let e = v - pred;
        sse += e * e;
        let new_level = pred + alpha * e;
        trend += beta * (new_level - level - trend);
        level = new_level;
    }
    (level, trend, sse)
}

/// Golden-section minimisation of `f` on `[lo, hi]`, returning the argmin found.
fn golden<T: Real>(lo: T, hi: T, f: impl Fn(T) -> T) -> T {
    let ratio = T::lit(0.618_033_988_749_894_9);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

fn grid_point<T: Real>(i: usize, steps: usize) -> T {
    T::from_count(i) / T::from_count(steps)
}

fn bracket<T: Real>(centre: T, half: T) -> (T, T) {
    ((centre - half).max(T::zero()), (centre + half).min(T::one()))
}

fn aicc<T: Real>(sse: T, errors: usize, k: usize) -> T {
    if errors <= k + 1 {
        return T::infinity();
    }
    let m = T::from_count(errors);
    let kt = T::from_count(k);
    let mse = sse / m;
    let loglik_term = if mse > T::zero() {
        m * mse.ln()
    } else {
        T::neg_infinity()
    };
    loglik_term + T::lit(2.0) * kt + T::lit(2.0) * kt * (kt + T::one()) / (m - kt - T::one())
}

/// Simple exponential smoothing with a fixed smoothing level.
pub fn fit_ses<T: Real>(series: &[T], alpha: T) -> Result<SmoothingFit<T>> {
    check_series(series)?;
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let (level, sse) = ses_pass(series, alpha);
    Ok(SmoothingFit {
        method: SmoothingMethod::Ses,
        alpha,
        beta: None,
        level,
        trend: None,
        sse,
        aicc: aicc(sse, series.len() - 1, 2),
        forecast: level,
    })
}

fn check_series<T: Real>(series: &[T]) -> Result<()> {
    if series.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "exponential smoothing needs at least 3 observations, got {}",
            series.len()
        )));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("score series contains non-finite values".into()));
    }
    Ok(())
}

fn optimise_ses<T: Real>(y: &[T]) -> SmoothingFit<T> {
    let sse = |a: T| ses_pass(y, a).1;
    let mut best_a = T::zero();
    let mut best = T::infinity();
    for i in 0..=SES_GRID_STEPS {
        let a = grid_point(i, SES_GRID_STEPS);
        let v = sse(a);
        if v < best {
            best = v;
            best_a = a;
        }
    }
    let (lo, hi) = bracket(best_a, grid_point(1, SES_GRID_STEPS));
    let refined = golden(lo, hi, sse);
    let alpha = if sse(refined) < best { refined } else { best_a };
    fit_ses(y, alpha).expect("series validated")
}

fn optimise_holt<T: Real>(y: &[T]) -> SmoothingFit<T> {
    let sse = |a: T, b: T| holt_pass(y, a, b).2;
    let mut best = (T::zero(), T::zero(), T::infinity());
    for i in 0..=HOLT_GRID_STEPS {
        for k in 0..=HOLT_GRID_STEPS {
            let (a, b) = (grid_point(i, HOLT_GRID_STEPS), grid_point(k, HOLT_GRID_STEPS));
            let v = sse(a, b);
            if v < best.2 {
                best = (a, b, v);
            }
        }
    }
    let half = grid_point(1, HOLT_GRID_STEPS);
    let (mut alpha, mut beta, mut cur) = best;
    for _ in 0..HOLT_SWEEPS {
        let (lo, hi) = bracket(alpha, half);
        let a = golden(lo, hi, |a| sse(a, beta));
        let v = sse(a, beta);
        if v < cur {
            alpha = a;
            cur = v;
        }
        let (lo, hi) = bracket(beta, half);
        let b = golden(lo, hi, |b| sse(alpha, b));
        let v = sse(alpha, b);
        if v < cur {
            beta = b;
            cur = v;
        }
    }
    let (level, trend, sse) = holt_pass(y, alpha, beta);
    SmoothingFit {
        method: SmoothingMethod::Holt,
        alpha,
        beta: Some(beta),
        level,
        trend: Some(trend),
        sse,
        aicc: aicc(sse, y.len() - 1, 4),
        forecast: level + trend,
    }
}

/// Fits SES and Holt and returns the one with the smaller AICc (SES on ties).
///
/// A constant series short-circuits to SES with its constant as forecast.
pub fn fit_forecast<T: Real>(series: &[T]) -> Result<SmoothingFit<T>> {
    check_series(series)?;
    if series.iter().all(|&v| v == series[0]) {
        return fit_ses(series, T::one());
    }
    let ses = optimise_ses(series);
    let holt = optimise_holt(series);
    Ok(if holt.aicc < ses.aicc { holt } else { ses })
}
