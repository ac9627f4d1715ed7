//! Forecasting of intraday particle-number-size-distribution curves.
//!
//! Hourly particle counts for many sizes are log-transformed and cut into
//! curves ([`panel`]), modelled with a multilevel functional time series
//! ([`mlfts`]) optionally preceded by a functional factor model ([`ffm`]),
//! forecast one step ahead with exponential smoothing of the scores
//! ([`scorets`]), updated as intraday observations arrive ([`update`]), and
//! wrapped in prediction intervals ([`intervals`]). [`eval`] holds the
//! expanding-window backtest and accuracy measures.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`.

pub mod error;
pub mod eval;
pub mod ffm;
pub mod fpca;
pub mod intervals;
mod linalg;
pub mod mlfts;
pub mod model;
pub mod panel;
pub mod scalar;
pub mod scorets;
pub mod update;

pub use error::{Error, Result};
pub use model::PointModel;
pub use scalar::Real;

pub type FunctionalPanel = panel::FunctionalPanel<f64>;
pub type RawSeries = panel::RawSeries<f64>;
pub type FpcaBasis = fpca::FpcaBasis<f64>;
pub type StackedBasis = fpca::StackedBasis<f64>;
pub type MlftsModel = mlfts::MlftsModel<f64>;
pub type FactorModel = ffm::FactorModel<f64>;
pub type UpdateProblem = update::UpdateProblem<f64>;
pub type IntervalCalibration = intervals::IntervalCalibration<f64>;
pub type ResidualStore = intervals::ResidualStore<f64>;
