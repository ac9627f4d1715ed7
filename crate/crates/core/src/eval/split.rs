//! Train / validation / test partition of the curves.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous partition of curve indices `0..n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    n: usize,
    train_end: usize,
    validation_end: usize,
}

impl SplitPlan {
    /// Half for training, a quarter each for validation and test
    /// (`204/102/102` for `n = 408`).
    pub fn standard(n: usize) -> Result<Self> {
        Self::with_proportions(n, 0.5, 0.25)
    }

    /// Training share `train`, validation share `validation`, test the rest.
    /// Both boundaries round down.
    pub fn with_proportions(n: usize, train: f64, validation: f64) -> Result<Self> {
        if !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split proportions {train}/{validation} must be positive and leave a test share"
            )));
        }
        let train_end = (n as f64 * train).floor() as usize;
        let validation_end = (n as f64 * (train + validation)).floor() as usize;
        Self::from_bounds(n, train_end, validation_end)
    }

    pub fn from_bounds(n: usize, train_end: usize, validation_end: usize) -> Result<Self> {
        if train_end < 2 || validation_end <= train_end || n <= validation_end {
            return Err(Error::InsufficientData(format!(
                "cannot split {n} curves at {train_end}/{validation_end}"
            )));
        }
        Ok(Self {
            n,
            train_end,
            validation_end,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }

    pub fn validation(&self) -> Range<usize> {
        self.train_end..self.validation_end
    }

    pub fn test(&self) -> Range<usize> {
        self.validation_end..self.n
    }
}
