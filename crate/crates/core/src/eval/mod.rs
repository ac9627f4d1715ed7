//! Backtesting and forecast evaluation.

pub mod backtest;
pub mod dm;
pub mod metrics;
pub mod report;
pub mod split;
pub mod wins;

pub use backtest::{expanding_window, WindowForecast};
pub use report::{run_backtest, BacktestConfig, BacktestReport, ReportTables};
pub use split::SplitPlan;
