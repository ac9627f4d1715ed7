//! The two one-step point forecasting models behind a single type.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffm::{self, DEFAULT_Q_MAX};
use crate::mlfts::{self, DEFAULT_COMPONENTS};
use crate::panel::FunctionalPanel;
use crate::scalar::Real;
use crate::scorets::ScoreForecaster;

/// How the number of factors is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorCount {
    /// Eigenvalue-ratio selection up to `q_max`, capped at `n - 1`.
    Auto { q_max: usize },
    Fixed(usize),
}

impl Default for FactorCount {
    fn default() -> Self {
        FactorCount::Auto {
            q_max: DEFAULT_Q_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointModel {
    Mlfts { k: usize, l: usize },
    FactorMlfts { q: FactorCount, k: usize, l: usize },
}

impl Default for PointModel {
    fn default() -> Self {
        PointModel::Mlfts {
            k: DEFAULT_COMPONENTS,
            l: DEFAULT_COMPONENTS,
        }
    }
}

impl PointModel {
    pub fn name(&self) -> &'static str {
        match self {
            PointModel::Mlfts { .. } => "mlfts",
            PointModel::FactorMlfts { .. } => "factor+mlfts",
        }
    }

    /// Parses `mlfts` or `factor+mlfts` with the given settings.
    pub fn parse(name: &str, k: usize, l: usize, q: FactorCount) -> Result<Self> {
        match name.trim() {
            "mlfts" => Ok(PointModel::Mlfts { k, l }),
            "factor+mlfts" | "factor" => Ok(PointModel::FactorMlfts { q, k, l }),
            other => Err(Error::InvalidArgument(format!(
                "unknown model '{other}' (expected mlfts or factor+mlfts)"
            ))),
        }
    }

    /// Number of factors this model would use on `panel` (0 for plain MLFTS).
    pub fn factor_count<T: Real>(&self, panel: &FunctionalPanel<T>) -> Result<usize> {
        match *self {
            PointModel::Mlfts { .. } => Ok(0),
            PointModel::FactorMlfts { q, .. } => match q {
                FactorCount::Fixed(q) => Ok(q.min(panel.days() - 1)),
                FactorCount::Auto { q_max } => {
                    let q_max = q_max.min(panel.days() - 1);
                    if q_max == 0 {
                        Ok(0)
                    } else {
                        Ok(ffm::select_q(panel, q_max)?.q)
                    }
                }
            },
        }
    }

    /// One-step-ahead forecast of the next curve for every size (`S × p`, log scale).
    pub fn forecast<T, F>(&self, panel: &FunctionalPanel<T>, forecaster: &F) -> Result<DMatrix<T>>
    where
        T: Real,
        F: ScoreForecaster<T> + ?Sized,
    {
        match *self {
            PointModel::Mlfts { k, l } => mlfts::fit(panel, k, l)?.forecast_one_step(forecaster),
            PointModel::FactorMlfts { k, l, .. } => {
                let q = self.factor_count(panel)?;
                ffm::forecast_factor_mlfts(panel, q, k, l, forecaster)
            }
        }
    }
}

impl fmt::Display for PointModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
