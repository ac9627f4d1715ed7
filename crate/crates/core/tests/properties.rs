use fpnsd_core::eval::metrics::{ecp_cpd, interval_score, mape, mean_interval_score};
use fpnsd_core::fpca::fit_fpca;
use fpnsd_core::intervals::{build_interval, IntervalCalibration, IntervalMethod, ResidualStore, ThetaPooling};
use fpnsd_core::mlfts;
use fpnsd_core::panel::{inverse_transform, log_transform, trapezoid_weights, FunctionalPanel, PartialDay, Segmentation};
use fpnsd_core::scorets::fit_forecast;
use fpnsd_core::update::{default_lambda_grid, ridge_update, UpdateProblem};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn panel_strategy() -> impl Strategy<Value = FunctionalPanel<f64>> {
    (1usize..4, 3usize..10, 2usize..9).prop_flat_map(|(s, n, p)| {
        prop::collection::vec(matrix(n, p), s).prop_map(move |values| {
            let labels = (0..values.len()).map(|i| i as f64 + 1.0).collect();
            FunctionalPanel::new(values, labels, Segmentation::Other).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_round_trip(count in 0.0f64..1e7) {
        let (back, clamped) = inverse_transform(log_transform(count).unwrap());
        prop_assert!(!clamped || count == 0.0);
        prop_assert!((back - count).abs() <= 1e-9 * (1.0 + count));
    }

    #[test]
    fn trapezoid_weights_sum_to_span(p in 2usize..200) {
        let grid: Vec<f64> = (0..p).map(|j| j as f64).collect();
        let sum: f64 = trapezoid_weights(&grid).iter().sum();
        prop_assert!((sum - (p - 1) as f64).abs() < 1e-9);
    }

    #[test]
    fn fpca_components_orthonormal_and_eigenvalues_sorted(x in matrix(7, 6), k in 1usize..8) {
        let w = trapezoid_weights(&(0..6).map(|j| j as f64).collect::<Vec<_>>());
        let b = fit_fpca(&x, &w, k).unwrap();
        let kk = b.n_components();
        prop_assert!(kk <= k.min(6));
        for a in 0..kk {
            for c in 0..kk {
                let ip: f64 = (0..6).map(|j| w[j] * b.components[(j, a)] * b.components[(j, c)]).sum();
                let target = if a == c { 1.0 } else { 0.0 };
                prop_assert!((ip - target).abs() < 1e-8);
            }
        }
        prop_assert!(b.eigenvalues.iter().zip(b.eigenvalues.iter().skip(1)).all(|(a, b)| a >= b));
        prop_assert!(b.eigenvalues.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn mlfts_identity(panel in panel_strategy(), k in 0usize..4, l in 0usize..4) {
        let m = mlfts::fit(&panel, k, l).unwrap();
        for s in 0..panel.sizes() {
            for t in 0..panel.days() {
                let fitted = m.fitted_curve(s, t).unwrap();
                for j in 0..panel.points() {
                    let total = fitted[j] + m.residuals[s][(t, j)];
                    prop_assert!((total - panel.size_values(s)[(t, j)]).abs() < 1e-10);
                }
            }
        }
        for s in 0..panel.sizes() {
            let vp = m.variance_proportion(s).unwrap();
            prop_assert!((0.0..=1.0).contains(&vp.ratio));
        }
    }

    #[test]
    fn smoothing_forecast_scales_with_power_of_two(series in prop::collection::vec(-5.0f64..5.0, 4..30), e in -3i32..4) {
        let c = 2f64.powi(e);
        let scaled: Vec<f64> = series.iter().map(|v| v * c).collect();
        let a = fit_forecast(&series).unwrap();
        let b = fit_forecast(&scaled).unwrap();
        prop_assert_eq!(a.method, b.method);
        prop_assert!((b.forecast - c * a.forecast).abs() <= 1e-9 * (1.0 + b.forecast.abs()));
    }

    #[test]
    fn ridge_norm_shrinks_along_grid(comps in matrix(12, 4), mean in matrix(12, 1), obs in prop::collection::vec(-3.0f64..3.0, 2..11)) {
        let m0 = obs.len();
        let base = UpdateProblem::new(
            mean.column(0).into_owned(),
            comps,
            PartialDay::new(obs, 12).unwrap(),
            DVector::zeros(4),
            0.0,
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for &lambda in default_lambda_grid::<f64>().iter().skip(1) {
            let r = ridge_update(&base.with_lambda(lambda).unwrap()).unwrap();
            let norm = r.coefficients.norm();
            prop_assert!(norm <= last * (1.0 + 1e-9) + 1e-12, "m0 {m0} lambda {lambda}: {norm} > {last}");
            last = norm;
        }
    }

    #[test]
    fn intervals_contain_forecast_and_nest_in_alpha(res in matrix(30, 4), point in prop::collection::vec(0.0f64..100.0, 4)) {
        let store = ResidualStore::new(vec![res]).unwrap();
        let p = DMatrix::from_row_slice(1, 4, &point);
        for method in [IntervalMethod::Sd, IntervalMethod::Conformal] {
            for pooling in [ThetaPooling::Size, ThetaPooling::Point] {
                let wide = IntervalCalibration::fit(&store, 0.05, pooling).unwrap();
                let narrow = IntervalCalibration::fit(&store, 0.2, pooling).unwrap();
                let iw = build_interval(&p, &wide, method, 0.05).unwrap();
                let inr = build_interval(&p, &narrow, method, 0.2).unwrap();
                for j in 0..4 {
                    prop_assert!(iw.lower[(0, j)] <= p[(0, j)] && p[(0, j)] <= iw.upper[(0, j)]);
                    prop_assert!(iw.lower[(0, j)] <= inr.lower[(0, j)]);
                    prop_assert!(iw.upper[(0, j)] >= inr.upper[(0, j)]);
                }
            }
        }
    }

    #[test]
    fn metrics_ignore_day_order(
        actual in prop::collection::vec(1.0f64..100.0, 12),
        fc in prop::collection::vec(0.0f64..100.0, 12),
        width in prop::collection::vec(0.0f64..30.0, 12),
        shift in 1usize..11,
    ) {
        let days = |v: &[f64]| -> Vec<DMatrix<f64>> { v.chunks(2).map(|c| DMatrix::from_row_slice(1, 2, c)).collect() };
        let lo: Vec<f64> = fc.iter().zip(&width).map(|(f, w)| f - w).collect();
        let up: Vec<f64> = fc.iter().zip(&width).map(|(f, w)| f + w).collect();
        let (a, f, l, u) = (days(&actual), days(&fc), days(&lo), days(&up));
        let rot = |v: &Vec<DMatrix<f64>>| { let mut r = v.clone(); r.rotate_left(shift % 6); r };
        let m1 = mape(&a, &f).unwrap().mape;
        let m2 = mape(&rot(&a), &rot(&f)).unwrap().mape;
        prop_assert!((m1 - m2).abs().max() < 1e-9);
        let (_, c1) = ecp_cpd(&a, &l, &u, 0.2).unwrap();
        let (_, c2) = ecp_cpd(&rot(&a), &rot(&l), &rot(&u), 0.2).unwrap();
        prop_assert_eq!(c1, c2);
        let s1 = mean_interval_score(&a, &l, &u, 0.2).unwrap();
        let s2 = mean_interval_score(&rot(&a), &rot(&l), &rot(&u), 0.2).unwrap();
        prop_assert!((&s1 - &s2).abs().max() < 1e-9);
        // score is at least the width, with equality iff inside
        for i in 0..12 {
            let s = interval_score(lo[i], up[i], actual[i], 0.2);
            let inside = actual[i] >= lo[i] && actual[i] <= up[i];
            if inside {
                prop_assert_eq!(s, up[i] - lo[i]);
            } else {
                prop_assert!(s > up[i] - lo[i]);
            }
        }
    }
}

#[test]
fn mean_score_equals_width_when_all_inside() {
    let a = vec![DMatrix::from_element(2, 3, 5.0), DMatrix::from_element(2, 3, 7.0)];
    let l = vec![DMatrix::from_element(2, 3, 1.0), DMatrix::from_element(2, 3, 6.0)];
    let u = vec![DMatrix::from_element(2, 3, 9.0), DMatrix::from_element(2, 3, 8.0)];
    let s = mean_interval_score(&a, &l, &u, 0.05).unwrap();
    assert!(s.iter().all(|&v| v == 5.0));
}

#[test]
fn single_precision_pipeline() {
    let x: DMatrix<f32> = DMatrix::from_fn(8, 6, |t, j| 1.0 + 0.1 * j as f32 + 0.05 * ((t * 7 + j * 3) % 5) as f32);
    let panel = FunctionalPanel::new(vec![x.clone(), x * 1.5], vec![1.0, 2.0], Segmentation::Other).unwrap();
    let model = mlfts::fit(&panel, 2, 2).unwrap();
    let f = model.forecast_one_step(&fpnsd_core::scorets::ExpSmoothing).unwrap();
    assert_eq!(f.shape(), (2, 6));
    assert!(f.iter().all(|v| v.is_finite()));
}
