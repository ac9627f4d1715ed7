//! Counts of which method has the lowest MAPE per hour or per size.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::finite_mean;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupBy {
    /// One winner per grid point, MAPE averaged over sizes.
    Hour,
    /// One winner per size, MAPE averaged over grid points.
    Size,
}

impl GroupBy {
    pub fn code(&self) -> &'static str {
        match self {
            GroupBy::Hour => "hour",
            GroupBy::Size => "size",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinCounts {
    /// Method names in lexicographic order.
    pub methods: Vec<String>,
    pub wins: Vec<usize>,
    /// Groups where the best MAPE was shared by more than one method.
    pub ties: usize,
}

/// Winner per group among `(method, S × p MAPE)` entries; ties credit the
/// lexicographically first method.
pub fn win_counts<T: Real>(mapes: &[(String, DMatrix<T>)], group: GroupBy) -> Result<WinCounts> {
    if mapes.len() < 2 {
        return Err(Error::InvalidArgument("win counts need at least two methods".into()));
    }
    let shape = mapes[0].1.shape();
    if mapes.iter().any(|(_, m)| m.shape() != shape) {
        return Err(Error::Shape("MAPE matrices differ in shape".into()));
    }
    let mut sorted: Vec<&(String, DMatrix<T>)> = mapes.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let groups = match group {
        GroupBy::Hour => shape.1,
        GroupBy::Size => shape.0,
    };
    let mut wins = vec![0; sorted.len()];
    let mut ties = 0;
    for g in 0..groups {
        let scores: Vec<T> = sorted
            .iter()
            .map(|(_, m)| match group {
                GroupBy::Hour => finite_mean(m.column(g).iter()),
                GroupBy::Size => finite_mean(m.row(g).iter()),
            })
            .collect();
        let mut best: Option<usize> = None;
        for (i, &v) in scores.iter().enumerate() {
            if v.is_finite() && best.is_none_or(|b| v < scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap_or(0);
        if scores.iter().filter(|&&v| v == scores[b]).count() > 1 {
            ties += 1;
        }
        wins[b] += 1;
    }
    Ok(WinCounts {
        methods: sorted.iter().map(|(n, _)| n.clone()).collect(),
        wins,
        ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fpnsd_testkit::random_matrix;

    #[test]
    fn dominant_method_takes_every_hour() {
        let good = DMatrix::from_element(3, 24, 10.0);
        let bad = DMatrix::from_element(3, 24, 20.0);
        let w = win_counts(&[("zeta".into(), good), ("alpha".into(), bad)], GroupBy::Hour).unwrap();
        assert_eq!(w.methods, vec!["alpha", "zeta"]);
        assert_eq!(w.wins, vec![0, 24]);
        assert_eq!(w.ties, 0);
    }

    #[test]
    fn ties_credit_first_name() {
        let m = DMatrix::from_element(2, 24, 5.0);
        let w = win_counts(&[("b".into(), m.clone()), ("a".into(), m)], GroupBy::Hour).unwrap();
        assert_eq!(w.wins, vec![24, 0]);
        assert_eq!(w.ties, 24);
    }

    #[test]
    fn matches_brute_force_argmin() {
        let mats: Vec<(String, DMatrix<f64>)> = (0..3)
            .map(|i| (format!("m{i}"), random_matrix(5, 24, 40 + i).abs()))
            .collect();
        for group in [GroupBy::Hour, GroupBy::Size] {
            let w = win_counts(&mats, group).unwrap();
            let groups = if group == GroupBy::Hour { 24 } else { 5 };
            let mut expect = [0usize; 3];
            for g in 0..groups {
                let means: Vec<f64> = mats
                    .iter()
                    .map(|(_, m)| match group {
                        GroupBy::Hour => m.column(g).mean(),
                        GroupBy::Size => m.row(g).mean(),
                    })
                    .collect();
                let best = (0..3).min_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap()).unwrap();
                expect[best] += 1;
            }
            assert_eq!(w.wins, expect.to_vec());
            assert_eq!(w.wins.iter().sum::<usize>(), groups);
        }
    }

    #[test]
    fn needs_two_methods() {
        assert!(win_counts(&[("a".to_string(), DMatrix::<f64>::zeros(1, 1))], GroupBy::Size).is_err());
    }
}
