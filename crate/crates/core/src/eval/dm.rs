//! Diebold–Mariano test of equal predictive accuracy.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MIN_DM_LENGTH: usize = 10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DmLoss {
    #[default]
    Squared,
    Absolute,
}

impl DmLoss {
    pub fn code(&self) -> &'static str {
        match self {
            DmLoss::Squared => "squared",
            DmLoss::Absolute => "absolute",
        }
    }

    pub fn apply<T: Real>(&self, error: T) -> T {
        match self {
            DmLoss::Squared => error * error,
            DmLoss::Absolute => error.abs(),
        }
    }
}

impl std::str::FromStr for DmLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "squared" | "se" => Ok(DmLoss::Squared),
            "absolute" | "ae" => Ok(DmLoss::Absolute),
            other => Err(Error::InvalidArgument(format!("unknown DM loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmResult {
    pub statistic: f64,
    /// Two-sided normal p-value.
    pub p_value: f64,
    /// Loss differentials had zero long-run variance but a nonzero mean.
    pub degenerate: bool,
    pub lag: usize,
}

/// Mean loss per day over all cells of `S × p` count-scale matrices.
pub fn daily_losses<T: Real>(actuals: &[DMatrix<T>], forecasts: &[DMatrix<T>], loss: DmLoss) -> Vec<f64> {
    actuals
        .iter()
        .zip(forecasts)
        .map(|(a, f)| {
            let n = a.len() as f64;
            a.iter().zip(f.iter()).map(|(&x, &y)| loss.apply(x - y).as_f64()).sum::<f64>() / n
        })
        .collect()
}

/// Tests `E[L_a - L_b] = 0` using a Bartlett long-run variance with lag `⌊W^{1/3}⌋`.
pub fn dm_test(loss_a: &[f64], loss_b: &[f64]) -> Result<DmResult> {
    if loss_a.len() != loss_b.len() {
        return Err(Error::Shape(format!(
            "loss series lengths {} and {} differ",
            loss_a.len(),
            loss_b.len()
        )));
    }
    let w = loss_a.len();
    if w < MIN_DM_LENGTH {
        return Err(Error::InsufficientData(format!(
            "DM test needs at least {MIN_DM_LENGTH} losses, got {w}"
        )));
    }
    if loss_a.iter().chain(loss_b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite loss".into()));
    }
    let lag = (w as f64).cbrt().floor() as usize;
    let d: Vec<f64> = loss_a.iter().zip(loss_b).map(|(a, b)| a - b).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Ok(DmResult {
            statistic: 0.0,
            p_value: 1.0,
            degenerate: false,
            lag,
        });
    }
    let wf = w as f64;
    let mean = d.iter().sum::<f64>() / wf;
    let autocov = |k: usize| -> f64 {
        (k..w).map(|t| (d[t] - mean) * (d[t - k] - mean)).sum::<f64>() / wf
    };
    let mut lrv = autocov(0);
    for k in 1..=lag {
        lrv += 2.0 * (1.0 - k as f64 / (lag as f64 + 1.0)) * autocov(k);
    }
    let scale = (lrv / wf).sqrt();
    if !(scale > 1e-300) || scale <= 1e-14 * mean.abs() {
        return Ok(DmResult {
            statistic: mean.signum() * f64::INFINITY,
            p_value: 0.0,
            degenerate: true,
            lag,
        });
    }
    let statistic = mean / scale;
    let normal = Normal::standard();
    let p_value = (2.0 * (1.0 - normal.cdf(statistic.abs()))).clamp(0.0, 1.0);
    Ok(DmResult {
        statistic,
        p_value,
        degenerate: false,
        lag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fpnsd_testkit::{normal_vec, rng};

    #[test]
    fn identical_losses() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let r = dm_test(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn constant_differential_is_degenerate() {
        let a = vec![2.0; 30];
        let b = vec![1.0; 30];
        let r = dm_test(&a, &b).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn short_series_rejected() {
        assert!(dm_test(&[1.0; 9], &[0.0; 9]).is_err());
        assert!(dm_test(&[1.0; 12], &[0.0; 11]).is_err());
    }

    #[test]
    fn lag_and_hand_computed_statistic() {
        // d = (1, -1, 1, ...) plus 0.5 on the first point; check against direct formulas.
        let b = vec![0.0; 27];
        let mut a: Vec<f64> = (0..27).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        a[0] += 0.5;
        let r = dm_test(&a, &b).unwrap();
        assert_eq!(r.lag, 3);
        let mean = a.iter().sum::<f64>() / 27.0;
        let g = |k: usize| (k..27).map(|t| (a[t] - mean) * (a[t - k] - mean)).sum::<f64>() / 27.0;
        let lrv = g(0) + 2.0 * (0.75 * g(1) + 0.5 * g(2) + 0.25 * g(3));
        assert!((r.statistic - mean / (lrv / 27.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn size_under_null() {
        let mut r = rng(77);
        let mut rejects = 0;
        for _ in 0..200 {
            let d = normal_vec(500, &mut r);
            let zero = vec![0.0; 500];
            if dm_test(&d, &zero).unwrap().statistic.abs() >= 1.96 {
                rejects += 1;
            }
        }
        assert!(rejects <= 20, "{rejects} rejections out of 200");
    }
}
