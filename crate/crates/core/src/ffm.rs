//! High-dimensional functional factor model with functional loadings and
//! scalar factors: `X_t^s(u) = Λ_s(u)ᵀ G_t + ε_t^s(u)`.
//!
//! Factors come from the leading eigenvectors of the `n × n` matrix of
//! size-averaged inner products between curves, scaled by `√n` so that
//! `(1/n) Gᵀ G = I_q`. Loadings are the least-squares projections
//! `Λ_s(u) = (1/n) Σ_t X_t^s(u) G_t`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fix_signs, numerical_rank, symmetric_eigen_desc};
use crate::mlfts;
use crate::panel::FunctionalPanel;
use crate::scalar::Real;
use crate::scorets::ScoreForecaster;

pub const DEFAULT_Q_MAX: usize = 6;

/// Largest eigenvalue ratio below which the spectrum is treated as gap-free.
pub const MIN_EIGEN_GAP: f64 = 1.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorOptions {
    /// Subtract each size's mean curve before building the Gram matrix.
    pub centre: bool,
}

/// Fitted factors and loadings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorModel<T: Real> {
    /// `n × q`; row `t` is `G_t`.
    pub factors: DMatrix<T>,
    /// One `p × q` matrix per size.
    pub loadings: Vec<DMatrix<T>>,
    /// All `n` eigenvalues of the Gram matrix, non-increasing.
    pub eigenvalues: DVector<T>,
    /// `S × p`; zero unless fitted with centring.
    pub means: DMatrix<T>,
    pub requested: usize,
}

impl<T: Real> FactorModel<T> {
    pub fn q(&self) -> usize {
        self.factors.ncols()
    }

    /// `Λ_s(u)ᵀ g` for every size, `S × p`.
    pub fn common_from_factors(&self, g: &DVector<T>) -> DMatrix<T> {
        let p = self.means.ncols();
        let mut out = self.means.clone();
        for (s, l) in self.loadings.iter().enumerate() {
            let curve = l * g;
            for j in 0..p {
                out[(s, j)] += curve[j];
            }
        }
        out
    }

    /// Fitted common component of size `s`, `n × p`.
    pub fn common_component(&self, s: usize) -> DMatrix<T> {
        let mut c = &self.factors * self.loadings[s].transpose();
        for mut row in c.row_iter_mut() {
            row += self.means.row(s);
        }
        c
    }
}

/// `Δ_{tt'} = (1/S) Σ_s ∫ X_t^s(u) X_{t'}^s(u) du`.
pub fn gram_matrix<T: Real>(panel: &FunctionalPanel<T>) -> DMatrix<T> {
    gram_of(panel.values(), panel.quad_weights())
}

fn gram_of<T: Real>(values: &[DMatrix<T>], weights: &[T]) -> DMatrix<T> {
    let n = values[0].nrows();
    let st = T::from_count(values.len());
    let sqrt_w = DVector::from_iterator(weights.len(), weights.iter().map(|w| w.sqrt()));
    let mut delta = DMatrix::zeros(n, n);
    for x in values {
        let mut y = x.clone();
        for mut row in y.row_iter_mut() {
            row.component_mul_assign(&sqrt_w.transpose());
        }
        delta += &y * y.transpose();
    }
    delta / st
}

fn size_means<T: Real>(panel: &FunctionalPanel<T>) -> DMatrix<T> {
    let nt = T::from_count(panel.days());
    DMatrix::from_fn(panel.sizes(), panel.points(), |s, j| {
        panel.size_values(s).column(j).sum() / nt
    })
}

pub fn fit_factors<T: Real>(panel: &FunctionalPanel<T>, q: usize) -> Result<FactorModel<T>> {
    fit_factors_with(panel, q, FactorOptions::default())
}

/// Estimates `q` factors; `q` beyond the rank of `Δ` is truncated with a warning.
pub fn fit_factors_with<T: Real>(
    panel: &FunctionalPanel<T>,
    q: usize,
    opts: FactorOptions,
) -> Result<FactorModel<T>> {
    let (s_count, n, p) = (panel.sizes(), panel.days(), panel.points());
    if q > 0 && q >= n {
        return Err(Error::InvalidArgument(format!("q = {q} must be at most n - 1 = {}", n - 1)));
    }
    let means = if opts.centre {
        size_means(panel)
    } else {
        DMatrix::zeros(s_count, p)
    };
    let data: Vec<DMatrix<T>> = (0..s_count)
        .map(|s| {
            let x = panel.size_values(s);
            DMatrix::from_fn(n, p, |t, j| x[(t, j)] - means[(s, j)])
        })
        .collect();
    let delta = gram_of(&data, panel.quad_weights());
    let scale = delta.trace() / T::from_count(n);
    let eig = symmetric_eigen_desc(delta);
    let rank = numerical_rank(&eig.values, scale.max(eig.values[0]));
    let qq = q.min(rank);
    if qq < q {
        log::warn!("factor model: q = {q} exceeds the Gram-matrix rank {rank}; truncating");
    }
    let mut vecs = eig.vectors.columns(0, qq).into_owned();
    fix_signs(&mut vecs);
    let nt = T::from_count(n);
    let factors = vecs * nt.sqrt();
    let loadings = data
        .iter()
        .map(|x| x.transpose() * &factors / nt)
        .collect();
    Ok(FactorModel {
        factors,
        loadings,
        eigenvalues: eig.values,
        means,
        requested: q,
    })
}

/// `ε_t^s(u) = X_t^s(u) − Λ_s(u)ᵀ G_t`.
pub fn residual_panel<T: Real>(
    model: &FactorModel<T>,
    panel: &FunctionalPanel<T>,
) -> Result<FunctionalPanel<T>> {
    if model.factors.nrows() != panel.days()
        || model.loadings.len() != panel.sizes()
        || model.means.ncols() != panel.points()
    {
        return Err(Error::Shape(format!(
            "factor model ({} curves, {} sizes) does not match panel ({} curves, {} sizes)",
            model.factors.nrows(),
            model.loadings.len(),
            panel.days(),
            panel.sizes()
        )));
    }
    let values = (0..panel.sizes())
        .map(|s| panel.size_values(s) - model.common_component(s))
        .collect();
    panel.with_values(values)
}

/// Result of the eigenvalue-ratio choice of the number of factors.
#[derive(Debug, Clone, PartialEq)]
pub struct QSelection<T> {
    pub q: usize,
    /// `λ_q / λ_{q+1}` for `q = 1..=q_max` (0 where `λ_q` is numerically zero).
    pub ratios: Vec<T>,
    /// No eigenvalue gap was found and `q = 1` is a fallback.
    pub no_gap: bool,
}

/// `argmax_q λ_q(Δ) / λ_{q+1}(Δ)` over `1 ≤ q ≤ q_max`, ties to the smaller q.
pub fn select_q<T: Real>(panel: &FunctionalPanel<T>, q_max: usize) -> Result<QSelection<T>> {
    let n = panel.days();
    if q_max == 0 || q_max >= n {
        return Err(Error::InvalidArgument(format!(
            "q_max = {q_max} must lie in 1..=n-1 = {}",
            n - 1
        )));
    }
    let delta = gram_matrix(panel);
    let scale = delta.trace() / T::from_count(n);
    let eig = symmetric_eigen_desc(delta);
    let tol = crate::scalar::rank_tolerance::<T>() * scale.max(eig.values[0]);
    let ratios: Vec<T> = (0..q_max)
        .map(|i| {
            let (a, b) = (eig.values[i], eig.values[i + 1]);
            if a <= tol {
                T::zero()
            } else {
                a / b.max(tol)
            }
        })
        .collect();
    let mut best = 0;
    for (i, r) in ratios.iter().enumerate() {
        if *r > ratios[best] {
            best = i;
        }
    }
    if ratios[best] < T::lit(MIN_EIGEN_GAP) {
        log::warn!("factor selection: no eigenvalue gap found; using q = 1");
        return Ok(QSelection {
            q: 1,
            ratios,
            no_gap: true,
        });
    }
    Ok(QSelection {
        q: best + 1,
        ratios,
        no_gap: false,
    })
}

/// Factor forecast plus the multilevel forecast of the factor-model residuals.
pub fn forecast_factor_mlfts<T, F>(
    panel: &FunctionalPanel<T>,
    q: usize,
    k: usize,
    l: usize,
    forecaster: &F,
) -> Result<DMatrix<T>>
where
    T: Real,
    F: ScoreForecaster<T> + ?Sized,
{
    let model = fit_factors(panel, q)?;
    let residuals = residual_panel(&model, panel)?;
    let g_hat = model
        .factors
        .column_iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|c| {
            let series: Vec<T> = c.iter().copied().collect();
            forecaster.forecast(&series)
        })
        .collect::<Result<Vec<T>>>()?;
    let common = model.common_from_factors(&DVector::from_vec(g_hat));
    let rest = mlfts::fit(&residuals, k, l)?.forecast_one_step(forecaster)?;
    Ok(common + rest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Segmentation;
    use fpnsd_testkit::{random_matrix, rng, normal_vec};

    fn panel(values: Vec<DMatrix<f64>>) -> FunctionalPanel<f64> {
        let labels = (0..values.len()).map(|s| s as f64 + 1.0).collect();
        FunctionalPanel::new(values, labels, Segmentation::Other).unwrap()
    }

    fn rank_one(s_count: usize, n: usize, p: usize, seed: u64) -> (FunctionalPanel<f64>, Vec<f64>) {
        let mut r = rng(seed);
        let g = normal_vec(n, &mut r);
        let values = (0..s_count)
            .map(|_| {
                let lam = normal_vec(p, &mut r);
                DMatrix::from_fn(n, p, |t, j| lam[j] * g[t])
            })
            .collect();
        (panel(values), g)
    }

    #[test]
    fn zero_panel_gives_zero_gram() {
        let p = panel(vec![DMatrix::zeros(4, 5); 2]);
        assert_eq!(gram_matrix(&p), DMatrix::zeros(4, 4));
    }

    #[test]
    fn gram_scales_quadratically() {
        let x = random_matrix(5, 6, 1);
        let y = random_matrix(5, 6, 2);
        let a = gram_matrix(&panel(vec![x.clone(), y.clone()]));
        let b = gram_matrix(&panel(vec![x * 3.0, y * 3.0]));
        assert!((b - a * 9.0).abs().max() < 1e-12);
    }

    #[test]
    fn gram_matches_hand_quadrature() {
        // Grid 0,1,2 → weights 0.5, 1, 0.5.
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 4.0]);
        let d = gram_matrix(&panel(vec![x]));
        assert!((d[(0, 0)] - (0.5 + 4.0 + 4.5)).abs() < 1e-14);
        assert!((d[(0, 1)] - (-0.5 + 0.0 + 6.0)).abs() < 1e-14);
        assert!((d[(1, 1)] - (0.5 + 0.0 + 8.0)).abs() < 1e-14);
        assert_eq!(d[(0, 1)], d[(1, 0)]);
    }

    #[test]
    fn rank_one_panel_is_recovered() {
        let (p, _) = rank_one(3, 10, 8, 5);
        let m = fit_factors(&p, 1).unwrap();
        let gtg = m.factors.transpose() * &m.factors / 10.0;
        assert!((gtg[(0, 0)] - 1.0).abs() < 1e-10);
        for s in 0..3 {
            assert!((m.common_component(s) - p.size_values(s)).abs().max() < 1e-8);
        }
        let r = residual_panel(&m, &p).unwrap();
        assert!(r.values().iter().all(|e| e.abs().max() < 1e-8));
    }

    #[test]
    fn q_zero_passes_panel_through() {
        let p = panel(vec![random_matrix(5, 4, 3)]);
        let m = fit_factors(&p, 0).unwrap();
        let r = residual_panel(&m, &p).unwrap();
        assert_eq!(r.values(), p.values());
    }

    #[test]
    fn q_beyond_rank_truncates() {
        let (p, _) = rank_one(2, 8, 5, 6);
        let m = fit_factors(&p, 4).unwrap();
        assert_eq!(m.q(), 1);
        assert!(fit_factors(&p, 8).is_err());
    }

    #[test]
    fn residuals_are_orthogonal_to_factors() {
        let p = panel(vec![random_matrix(9, 6, 1), random_matrix(9, 6, 2)]);
        let m = fit_factors(&p, 3).unwrap();
        let r = residual_panel(&m, &p).unwrap();
        for s in 0..2 {
            let proj = r.size_values(s).transpose() * &m.factors / 9.0;
            assert!(proj.abs().max() < 1e-8);
            let sum = m.common_component(s) + r.size_values(s);
            assert!((sum - p.size_values(s)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn centred_option_keeps_identity() {
        let p = panel(vec![random_matrix(9, 6, 3).add_scalar(2.0)]);
        let m = fit_factors_with(&p, 2, FactorOptions { centre: true }).unwrap();
        let r = residual_panel(&m, &p).unwrap();
        let sum = m.common_component(0) + r.size_values(0);
        assert!((sum - p.size_values(0)).abs().max() < 1e-12);
    }

    #[test]
    fn white_noise_has_no_gap() {
        let values = (0..10).map(|s| random_matrix(8, 24, 100 + s)).collect();
        let sel = select_q(&panel(values), 6).unwrap();
        assert_eq!(sel.q, 1);
        assert!(sel.no_gap);
    }

    #[test]
    fn select_q_picks_two_equal_factors() {
        let mut r = rng(9);
        let n = 20;
        let g1 = normal_vec(n, &mut r);
        let g2 = normal_vec(n, &mut r);
        let values = (0..3)
            .map(|_| {
                let a = normal_vec(12, &mut r);
                let b = normal_vec(12, &mut r);
                let noise = normal_vec(n * 12, &mut r);
                DMatrix::from_fn(n, 12, |t, j| a[j] * g1[t] + b[j] * g2[t] + 1e-3 * noise[t * 12 + j])
            })
            .collect();
        let sel = select_q(&panel(values), 6).unwrap();
        assert_eq!(sel.q, 2);
    }

    #[test]
    fn zero_factors_equal_plain_mlfts() {
        let p = panel(vec![random_matrix(8, 5, 1), random_matrix(8, 5, 2)]);
        let fc = crate::scorets::ExpSmoothing;
        let a = forecast_factor_mlfts(&p, 0, 2, 2, &fc).unwrap();
        let b = mlfts::fit(&p, 2, 2).unwrap().forecast_one_step(&fc).unwrap();
        assert_eq!(a, b);
    }
}
