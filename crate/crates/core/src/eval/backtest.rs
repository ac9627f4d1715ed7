//! Expanding-window one-step-ahead forecasting.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::panel::FunctionalPanel;
use crate::scalar::Real;

/// Forecast of curve `target` made from curves `0..target`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowForecast<T: Real> {
    pub target: usize,
    /// `S × p`, same scale as the panel.
    pub forecast: DMatrix<T>,
    pub actual: DMatrix<T>,
}

/// Fits on the first `w` curves and forecasts curve `w + 1` for every
/// `w = start..n-1` (1-based), giving `n - start` forecasts in order.
///
/// Windows run in parallel; the first failing window aborts with its target index.
pub fn expanding_window<T, F>(
    panel: &FunctionalPanel<T>,
    start: usize,
    forecaster: F,
) -> Result<Vec<WindowForecast<T>>>
where
    T: Real,
    F: Fn(&FunctionalPanel<T>) -> Result<DMatrix<T>> + Sync,
{
    expanding_window_range(panel, start, panel.days(), forecaster)
}

/// As [`expanding_window`] but only for targets `start..end` (0-based).
pub fn expanding_window_range<T, F>(
    panel: &FunctionalPanel<T>,
    start: usize,
    end: usize,
    forecaster: F,
) -> Result<Vec<WindowForecast<T>>>
where
    T: Real,
    F: Fn(&FunctionalPanel<T>) -> Result<DMatrix<T>> + Sync,
{
    let n = panel.days();
    if start == 0 || start >= n || end > n || end <= start {
        return Err(Error::InvalidArgument(format!(
            "window targets {start}..{end} invalid for {n} curves"
        )));
    }
    (start..end)
        .into_par_iter()
        .map(|w| {
            let run = || -> Result<WindowForecast<T>> {
                let history = panel.head(w)?;
                let forecast = forecaster(&history)?;
                if forecast.shape() != (panel.sizes(), panel.points()) {
                    return Err(Error::Shape(format!(
                        "forecast is {:?}, expected {:?}",
                        forecast.shape(),
                        (panel.sizes(), panel.points())
                    )));
                }
                Ok(WindowForecast {
                    target: w,
                    forecast,
                    actual: panel.day(w),
                })
            };
            run().map_err(|e| Error::Window {
                index: w,
                source: Box::new(e),
            })
        })
        .collect()
}
