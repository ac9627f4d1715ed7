//! Full backtest of one panel: point forecasts, intervals, updating and the
//! summary tables written to disk.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::{Datelike, Duration};
use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::backtest::{expanding_window_range, WindowForecast};
use crate::eval::dm::{daily_losses, dm_test, DmLoss, MIN_DM_LENGTH};
use crate::eval::metrics::{ecp_cpd, finite_mean, mape, mean_interval_score};
use crate::eval::split::SplitPlan;
use crate::eval::wins::{win_counts, GroupBy};
use crate::intervals::{build_interval, IntervalCalibration, IntervalMethod, ResidualStore, ThetaPooling};
use crate::model::PointModel;
use crate::panel::{to_count_scale, weekday_code, FunctionalPanel, Segmentation};
use crate::scalar::Real;
use crate::scorets::ExpSmoothing;
use crate::update::{
    block_moving_forecast, build_validation_cases, default_lambda_grid, regression_update,
    select_lambda_at, LambdaSchedule, ShrinkageMethod, UpdateMethod, ValidationCase,
    DEFAULT_STACKED_COMPONENTS,
};

/// How λ is chosen for ridge and PLS.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaPolicy {
    /// Minimum validation MAPE over the grid.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSettings {
    pub methods: Vec<UpdateMethod>,
    /// Observed points at which updates are evaluated.
    pub m0: Vec<usize>,
    pub lambda: LambdaPolicy,
    pub grid: Vec<f64>,
    pub n_components: usize,
}

impl Default for UpdateSettings {
    fn default() -> Self {
        Self {
            methods: UpdateMethod::ALL.to_vec(),
            m0: (1..24).collect(),
            lambda: LambdaPolicy::Auto,
            grid: default_lambda_grid(),
            n_components: DEFAULT_STACKED_COMPONENTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub models: Vec<PointModel>,
    pub alphas: Vec<f64>,
    pub interval_methods: Vec<IntervalMethod>,
    pub pooling: ThetaPooling,
    pub train_share: f64,
    pub validation_share: f64,
    pub update: Option<UpdateSettings>,
    pub dm_loss: DmLoss,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            models: vec![
                PointModel::default(),
                PointModel::parse("factor+mlfts", 6, 6, Default::default()).expect("known model"),
            ],
            alphas: vec![0.2, 0.05],
            interval_methods: vec![IntervalMethod::Sd, IntervalMethod::Conformal],
            pooling: ThetaPooling::Size,
            train_share: 0.5,
            validation_share: 0.25,
            update: Some(UpdateSettings::default()),
            dm_loss: DmLoss::Squared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeHourRow {
    pub label: String,
    pub method: String,
    pub hour: usize,
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeSizeRow {
    pub label: String,
    pub method: String,
    pub size: f64,
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub label: String,
    pub method: String,
    pub interval: String,
    pub alpha: f64,
    pub hour: usize,
    pub ecp: f64,
    pub cpd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub label: String,
    pub method: String,
    pub interval: String,
    pub alpha: f64,
    pub hour: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRow {
    pub label: String,
    pub group: String,
    pub method: String,
    pub wins: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub label: String,
    pub method: String,
    pub m0: usize,
    pub lambda: Option<f64>,
    pub mape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateIntervalRow {
    pub label: String,
    pub method: String,
    pub m0: usize,
    pub interval: String,
    pub alpha: f64,
    pub ecp: f64,
    pub cpd: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmRow {
    pub label: String,
    pub method_a: String,
    pub method_b: String,
    pub loss: String,
    pub statistic: f64,
    pub p_value: f64,
    pub degenerate: bool,
    pub lag: usize,
}

/// Plot-ready summary tables; several backtests append into one set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTables {
    pub mape_by_hour: Vec<MapeHourRow>,
    pub mape_by_size: Vec<MapeSizeRow>,
    pub cpd: Vec<CoverageRow>,
    pub interval_score: Vec<ScoreRow>,
    pub win_counts: Vec<WinRow>,
    pub update_mape: Vec<UpdateRow>,
    pub update_intervals: Vec<UpdateIntervalRow>,
    pub dm: Vec<DmRow>,
}

fn write_rows<R: Serialize>(dir: &Path, name: &str, rows: &[R], header: &[&str]) -> Result<usize> {
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(File::create(dir.join(name))?));
    wtr.write_record(header)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(rows.len())
}

impl ReportTables {
    pub fn extend(&mut self, other: ReportTables) {
        self.mape_by_hour.extend(other.mape_by_hour);
        self.mape_by_size.extend(other.mape_by_size);
        self.cpd.extend(other.cpd);
        self.interval_score.extend(other.interval_score);
        self.win_counts.extend(other.win_counts);
        self.update_mape.extend(other.update_mape);
        self.update_intervals.extend(other.update_intervals);
        self.dm.extend(other.dm);
    }

    /// Writes every table as CSV into `dir`; returns `(file name, row count)`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<(String, usize)>> {
        let files = [
            ("mape_by_hour.csv", write_rows(dir, "mape_by_hour.csv", &self.mape_by_hour, &["label", "method", "hour", "mape"])?),
            ("mape_by_size.csv", write_rows(dir, "mape_by_size.csv", &self.mape_by_size, &["label", "method", "size", "mape"])?),
            ("cpd.csv", write_rows(dir, "cpd.csv", &self.cpd, &["label", "method", "interval", "alpha", "hour", "ecp", "cpd"])?),
            (
                "interval_score.csv",
                write_rows(dir, "interval_score.csv", &self.interval_score, &["label", "method", "interval", "alpha", "hour", "score"])?,
            ),
            ("win_counts.csv", write_rows(dir, "win_counts.csv", &self.win_counts, &["label", "group", "method", "wins", "ties"])?),
            ("update_mape.csv", write_rows(dir, "update_mape.csv", &self.update_mape, &["label", "method", "m0", "lambda", "mape"])?),
            (
                "update_intervals.csv",
                write_rows(
                    dir,
                    "update_intervals.csv",
                    &self.update_intervals,
                    &["label", "method", "m0", "interval", "alpha", "ecp", "cpd", "score"],
                )?,
            ),
            (
                "dm.csv",
                write_rows(dir, "dm.csv", &self.dm, &["label", "method_a", "method_b", "loss", "statistic", "p_value", "degenerate", "lag"])?,
            ),
        ];
        Ok(files.into_iter().map(|(n, c)| (n.to_string(), c)).collect())
    }
}

/// Forecasts of one point model on the validation and test curves.
#[derive(Debug, Clone)]
pub struct ModelRun<T: Real> {
    pub name: String,
    /// Count scale.
    pub validation: Vec<WindowForecast<T>>,
    /// Count scale.
    pub test: Vec<WindowForecast<T>>,
    /// One per α, fitted on the validation residuals.
    pub calibrations: Vec<IntervalCalibration<T>>,
}

#[derive(Debug, Clone)]
pub struct BacktestReport<T: Real> {
    pub label: String,
    pub split: SplitPlan,
    pub size_labels: Vec<f64>,
    pub runs: Vec<ModelRun<T>>,
    pub lambda_schedule: LambdaSchedule<T>,
    pub tables: ReportTables,
    pub warnings: Vec<String>,
    /// Forecast cells clamped to zero on the count scale.
    pub clamped: usize,
    /// Cells left out of MAPE because the actual count was zero.
    pub excluded: usize,
}

impl<T: Real> BacktestReport<T> {
    /// Number of test forecasts per model.
    pub fn test_forecasts(&self) -> usize {
        self.split.test().len()
    }
}

fn to_counts<T: Real>(windows: Vec<WindowForecast<T>>, clamped: &mut usize) -> Vec<WindowForecast<T>> {
    windows
        .into_iter()
        .map(|w| {
            let (forecast, c) = to_count_scale(&w.forecast);
            *clamped += c;
            WindowForecast {
                target: w.target,
                forecast,
                actual: to_count_scale(&w.actual).0,
            }
        })
        .collect()
}

/// Width of the reporting chunk and its weekday labels for curve `t`.
fn chunk_labels<T: Real>(panel: &FunctionalPanel<T>, t: usize) -> (usize, Vec<String>) {
    let p = panel.points();
    let day_sized = !matches!(panel.segmentation(), Segmentation::Other) && p.is_multiple_of(24);
    let width = if day_sized { 24 } else { p };
    let chunks = p / width;
    let labels = (0..chunks)
        .map(|k| match (panel.starts().get(t), panel.segmentation()) {
            (Some(start), _) if day_sized => {
                weekday_code((*start + Duration::hours((k * 24) as i64)).weekday()).to_string()
            }
            (_, Segmentation::Weekday(d)) => weekday_code(d).to_string(),
            _ => "all".to_string(),
        })
        .collect();
    (width, labels)
}

fn label_order(label: &str) -> (usize, String) {
    let days = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];
    (days.iter().position(|d| *d == label).unwrap_or(7), label.to_string())
}

/// `(label, [(target, column offset)])` for each reporting label.
type LabelChunks = Vec<(String, Vec<(usize, usize)>)>;

/// Per-label slices of every test curve.
fn test_chunks<T: Real>(panel: &FunctionalPanel<T>, split: &SplitPlan) -> (usize, LabelChunks) {
    let mut by_label: BTreeMap<(usize, String), Vec<(usize, usize)>> = BTreeMap::new();
    let mut width = panel.points();
    for (i, t) in split.test().enumerate() {
        let (w, labels) = chunk_labels(panel, t);
        width = w;
        for (k, l) in labels.into_iter().enumerate() {
            by_label.entry(label_order(&l)).or_default().push((i, k * w));
        }
    }
    (width, by_label.into_iter().map(|((_, l), v)| (l, v)).collect())
}

fn cols<T: Real>(m: &DMatrix<T>, start: usize, width: usize) -> DMatrix<T> {
    m.columns(start, width).into_owned()
}

fn hour_means<T: Real>(m: &DMatrix<T>) -> Vec<f64> {
    (0..m.ncols()).map(|j| finite_mean(m.column(j).iter()).as_f64()).collect()
}

/// Runs the expanding-window backtest of every configured model on `panel`.
///
/// `label` names the panel in the λ schedule and the updating tables
/// (e.g. a weekday code, `day` or `week`).
pub fn run_backtest<T: Real>(
    panel: &FunctionalPanel<T>,
    label: &str,
    config: &BacktestConfig,
) -> Result<BacktestReport<T>> {
    if config.models.is_empty() {
        return Err(Error::InvalidArgument("no models to backtest".into()));
    }
    if config.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(Error::InvalidArgument("alphas must lie in (0, 1)".into()));
    }
    let split = SplitPlan::with_proportions(panel.days(), config.train_share, config.validation_share)?;
    let n = panel.days();
    let mut clamped = 0;
    let mut warnings = Vec::new();
    for a in &config.alphas {
        let v = split.validation().len();
        if (v as f64) < (1.0 / a).ceil() {
            warnings.push(format!(
                "{label}: only {v} validation curves for alpha = {a}; conformal quantile is the largest residual"
            ));
        }
    }

    let mut runs = Vec::new();
    for model in &config.models {
        let fc = |h: &FunctionalPanel<T>| model.forecast(h, &ExpSmoothing);
        let validation = to_counts(
            expanding_window_range(panel, split.validation().start, split.validation().end, fc)?,
            &mut clamped,
        );
        let test = to_counts(expanding_window_range(panel, split.test().start, n, fc)?, &mut clamped);
        let actuals: Vec<_> = validation.iter().map(|w| w.actual.clone()).collect();
        let preds: Vec<_> = validation.iter().map(|w| w.forecast.clone()).collect();
        let store = ResidualStore::from_pairs(&actuals, &preds)?;
        let calibrations = config
            .alphas
            .iter()
            .map(|&a| IntervalCalibration::fit(&store, T::lit(a), config.pooling))
            .collect::<Result<Vec<_>>>()?;
        for c in &calibrations {
            for s in &c.degenerate {
                warnings.push(format!(
                    "{label}/{}: size {} has zero residual sd; theta set to 0",
                    model.name(),
                    panel.size_labels()[*s]
                ));
            }
        }
        runs.push(ModelRun {
            name: model.name().to_string(),
            validation,
            test,
            calibrations,
        });
    }

    let mut tables = ReportTables::default();
    let mut excluded = 0;
    let (width, chunks) = test_chunks(panel, &split);
    for (chunk_label, slices) in &chunks {
        let mut label_mapes = Vec::new();
        let mut losses: Vec<(String, Vec<f64>)> = Vec::new();
        for run in &runs {
            let actual: Vec<_> = slices.iter().map(|&(i, c)| cols(&run.test[i].actual, c, width)).collect();
            let pred: Vec<_> = slices.iter().map(|&(i, c)| cols(&run.test[i].forecast, c, width)).collect();
            let pm = mape(&actual, &pred)?;
            excluded += pm.excluded;
            for (hour, v) in hour_means(&pm.mape).into_iter().enumerate() {
                tables.mape_by_hour.push(MapeHourRow {
                    label: chunk_label.clone(),
                    method: run.name.clone(),
                    hour,
                    mape: v,
                });
            }
            for (s, size) in panel.size_labels().iter().enumerate() {
                tables.mape_by_size.push(MapeSizeRow {
                    label: chunk_label.clone(),
                    method: run.name.clone(),
                    size: *size,
                    mape: finite_mean(pm.mape.row(s).iter()).as_f64(),
                });
            }
            for cal in &run.calibrations {
                for &im in &config.interval_methods {
                    let mut lower = Vec::new();
                    let mut upper = Vec::new();
                    for &(i, c) in slices {
                        let iv = build_interval(&run.test[i].forecast, cal, im, cal.alpha)?;
                        lower.push(cols(&iv.lower, c, width));
                        upper.push(cols(&iv.upper, c, width));
                    }
                    let (ecp, cpd) = ecp_cpd(&actual, &lower, &upper, cal.alpha)?;
                    let score = mean_interval_score(&actual, &lower, &upper, cal.alpha)?;
                    let (e, d, sc) = (hour_means(&ecp), hour_means(&cpd), hour_means(&score));
                    for hour in 0..width {
                        tables.cpd.push(CoverageRow {
                            label: chunk_label.clone(),
                            method: run.name.clone(),
                            interval: im.code().into(),
                            alpha: cal.alpha.as_f64(),
                            hour,
                            ecp: e[hour],
                            cpd: d[hour],
                        });
                        tables.interval_score.push(ScoreRow {
                            label: chunk_label.clone(),
                            method: run.name.clone(),
                            interval: im.code().into(),
                            alpha: cal.alpha.as_f64(),
                            hour,
                            score: sc[hour],
                        });
                    }
                }
            }
            losses.push((run.name.clone(), daily_losses(&actual, &pred, config.dm_loss)));
            label_mapes.push((run.name.clone(), pm.mape));
        }
        if label_mapes.len() >= 2 {
            for group in [GroupBy::Hour, GroupBy::Size] {
                let w = win_counts(&label_mapes, group)?;
                for (m, wins) in w.methods.iter().zip(&w.wins) {
                    tables.win_counts.push(WinRow {
                        label: chunk_label.clone(),
                        group: group.code().into(),
                        method: m.clone(),
                        wins: *wins,
                        ties: w.ties,
                    });
                }
            }
            for i in 0..losses.len() {
                for j in i + 1..losses.len() {
                    if losses[i].1.len() < MIN_DM_LENGTH {
                        warnings.push(format!(
                            "{chunk_label}: DM test skipped, only {} test curves",
                            losses[i].1.len()
                        ));
                        continue;
                    }
                    let r = dm_test(&losses[i].1, &losses[j].1)?;
                    tables.dm.push(DmRow {
                        label: chunk_label.clone(),
                        method_a: losses[i].0.clone(),
                        method_b: losses[j].0.clone(),
                        loss: config.dm_loss.code().into(),
                        statistic: r.statistic,
                        p_value: r.p_value,
                        degenerate: r.degenerate,
                        lag: r.lag,
                    });
                }
            }
        }
    }

    let mut lambda_schedule = LambdaSchedule::new();
    if let Some(settings) = &config.update {
        if !settings.methods.is_empty() && !settings.m0.is_empty() {
            let ctx = UpdateContext {
                panel,
                split: &split,
                settings,
                config,
                label,
                baseline: &runs[0],
                bm_model: &config.models[0],
            };
            ctx.run(&mut tables, &mut lambda_schedule, &mut warnings, &mut clamped)?;
        }
    }

    for w in &warnings {
        warn!("{w}");
    }
    Ok(BacktestReport {
        label: label.to_string(),
        split,
        size_labels: panel.size_labels().to_vec(),
        runs,
        lambda_schedule,
        tables,
        warnings,
        clamped,
        excluded,
    })
}

struct UpdateContext<'a, T: Real> {
    panel: &'a FunctionalPanel<T>,
    split: &'a SplitPlan,
    settings: &'a UpdateSettings,
    config: &'a BacktestConfig,
    label: &'a str,
    baseline: &'a ModelRun<T>,
    bm_model: &'a PointModel,
}

/// Log-scale forecasts of the remaining points for each target curve.
type TailForecasts<T> = Vec<DMatrix<T>>;

impl<T: Real> UpdateContext<'_, T> {
    fn tails(
        &self,
        method: UpdateMethod,
        m0: usize,
        lambda: T,
        cases: &[ValidationCase<T>],
        targets: std::ops::Range<usize>,
    ) -> Result<TailForecasts<T>> {
        match method {
            UpdateMethod::BlockMoving => targets
                .into_par_iter()
                .map(|w| {
                    let history = self.panel.head(w)?;
                    let partial = self.panel.day(w).columns(0, m0).into_owned();
                    block_moving_forecast(&history, &partial, self.bm_model, &ExpSmoothing)
                })
                .collect(),
            _ => cases
                .par_iter()
                .map(|c| {
                    let observed = c.observed.columns(0, m0).into_owned();
                    regression_update(method, &c.basis, &c.ts_scores, &observed, lambda)
                })
                .collect(),
        }
    }

    fn run(
        &self,
        tables: &mut ReportTables,
        schedule: &mut LambdaSchedule<T>,
        warnings: &mut Vec<String>,
        clamped: &mut usize,
    ) -> Result<()> {
        let p = self.panel.points();
        if let Some(&bad) = self.settings.m0.iter().find(|&&m| m == 0 || m >= p) {
            return Err(Error::InvalidArgument(format!("update m0 = {bad} outside 1..{p}")));
        }
        let needs_cases = self.settings.methods.iter().any(|m| *m != UpdateMethod::BlockMoving);
        let (val_cases, test_cases) = if needs_cases {
            let nc = self.settings.n_components;
            (
                build_validation_cases(self.panel, self.split.validation().start, self.split.validation().end, nc, &ExpSmoothing)?,
                build_validation_cases(self.panel, self.split.test().start, self.split.n(), nc, &ExpSmoothing)?,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let grid: Vec<T> = self.settings.grid.iter().map(|&g| T::lit(g)).collect();
        let mut lambdas: BTreeMap<UpdateMethod, Vec<T>> = BTreeMap::new();
        for &method in &self.settings.methods {
            let shrink = match method {
                UpdateMethod::Ridge => ShrinkageMethod::Ridge,
                UpdateMethod::Pls => ShrinkageMethod::Pls,
                _ => continue,
            };
            let chosen = match self.settings.lambda {
                LambdaPolicy::Auto => select_lambda_at(&val_cases, shrink, &grid, &self.settings.m0)?,
                LambdaPolicy::Fixed(v) => vec![T::lit(v); self.settings.m0.len()],
            };
            for (&m0, &l) in self.settings.m0.iter().zip(&chosen) {
                schedule.insert(self.label, m0, shrink, l)?;
            }
            lambdas.insert(method, chosen);
        }

        let val_actual: Vec<DMatrix<T>> = self.split.validation().map(|t| to_count_scale(&self.panel.day(t)).0).collect();
        let test_actual: Vec<DMatrix<T>> = self.split.test().map(|t| to_count_scale(&self.panel.day(t)).0).collect();
        let tail = |m: &DMatrix<T>, m0: usize| m.columns(m0, p - m0).into_owned();

        for (mi, &m0) in self.settings.m0.iter().enumerate() {
            let val_act: Vec<_> = val_actual.iter().map(|m| tail(m, m0)).collect();
            let test_act: Vec<_> = test_actual.iter().map(|m| tail(m, m0)).collect();
            // Non-updated baseline on the same remaining points.
            let base_val: Vec<_> = self.baseline.validation.iter().map(|w| tail(&w.forecast, m0)).collect();
            let base_test: Vec<_> = self.baseline.test.iter().map(|w| tail(&w.forecast, m0)).collect();
            self.record(tables, "none", m0, None, &val_act, &base_val, &test_act, &base_test)?;

            for &method in &self.settings.methods {
                let lambda = lambdas.get(&method).map(|l| l[mi]).unwrap_or_else(T::zero);
                let attempt = self
                    .tails(method, m0, lambda, &val_cases, self.split.validation())
                    .and_then(|v| Ok((v, self.tails(method, m0, lambda, &test_cases, self.split.test())?)));
                let (val_fc, test_fc) = match attempt {
                    Ok(x) => x,
                    Err(Error::Singular(msg)) => {
                        warnings.push(format!("{}: {method} undefined at m0 = {m0} ({msg})", self.label));
                        tables.update_mape.push(UpdateRow {
                            label: self.label.to_string(),
                            method: method.code().into(),
                            m0,
                            lambda: None,
                            mape: f64::NAN,
                        });
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let mut counts = |v: Vec<DMatrix<T>>| -> Vec<DMatrix<T>> {
                    v.into_iter()
                        .map(|m| {
                            let (c, k) = to_count_scale(&m);
                            *clamped += k;
                            c
                        })
                        .collect()
                };
                let val_fc = counts(val_fc);
                let test_fc = counts(test_fc);
                let lam = method.is_shrinkage().then(|| lambda.as_f64());
                self.record(tables, method.code(), m0, lam, &val_act, &val_fc, &test_act, &test_fc)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        tables: &mut ReportTables,
        method: &str,
        m0: usize,
        lambda: Option<f64>,
        val_actual: &[DMatrix<T>],
        val_fc: &[DMatrix<T>],
        test_actual: &[DMatrix<T>],
        test_fc: &[DMatrix<T>],
    ) -> Result<()> {
        let pm = mape(test_actual, test_fc)?;
        tables.update_mape.push(UpdateRow {
            label: self.label.to_string(),
            method: method.to_string(),
            m0,
            lambda,
            mape: finite_mean(pm.mape.iter()).as_f64(),
        });
        let store = ResidualStore::from_pairs(val_actual, val_fc)?;
        for &a in &self.config.alphas {
            let cal = IntervalCalibration::fit(&store, T::lit(a), self.config.pooling)?;
            for &im in &self.config.interval_methods {
                let mut lower = Vec::new();
                let mut upper = Vec::new();
                for f in test_fc {
                    let iv = build_interval(f, &cal, im, cal.alpha)?;
                    lower.push(iv.lower);
                    upper.push(iv.upper);
                }
                let (ecp, cpd) = ecp_cpd(test_actual, &lower, &upper, cal.alpha)?;
                let score = mean_interval_score(test_actual, &lower, &upper, cal.alpha)?;
                tables.update_intervals.push(UpdateIntervalRow {
                    label: self.label.to_string(),
                    method: method.to_string(),
                    m0,
                    interval: im.code().into(),
                    alpha: a,
                    ecp: finite_mean(ecp.iter()).as_f64(),
                    cpd: finite_mean(cpd.iter()).as_f64(),
                    score: finite_mean(score.iter()).as_f64(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fpnsd_testkit::{normal_vec, rng};

    fn synthetic(n: usize, sizes: usize, seed: u64) -> FunctionalPanel<f64> {
        let mut r = rng(seed);
        let values = (0..sizes)
            .map(|s| {
                let noise = normal_vec(n * 24, &mut r);
                DMatrix::from_fn(n, 24, |t, j| {
                    2.5 + 0.1 * s as f64 + 0.5 * (j as f64 / 24.0 * std::f64::consts::TAU).sin()
                        + 0.05 * (t as f64 * 0.3).cos()
                        + 0.1 * noise[t * 24 + j]
                })
            })
            .collect();
        FunctionalPanel::new(values, (0..sizes).map(|s| 10.0 + s as f64).collect(), Segmentation::Other).unwrap()
    }

    fn small_config() -> BacktestConfig {
        BacktestConfig {
            update: Some(UpdateSettings {
                methods: UpdateMethod::ALL.to_vec(),
                m0: vec![3, 12],
                lambda: LambdaPolicy::Auto,
                grid: vec![0.0, 0.1, 10.0],
                n_components: 3,
            }),
            models: vec![PointModel::Mlfts { k: 2, l: 2 }],
            ..Default::default()
        }
    }

    #[test]
    fn bookkeeping_on_small_panel() {
        let panel = synthetic(24, 3, 5);
        let rep = run_backtest(&panel, "all", &small_config()).unwrap();
        assert_eq!(rep.split.test().len(), 6);
        assert_eq!(rep.runs[0].test.len(), 6);
        assert_eq!(rep.runs[0].validation.len(), 6);
        assert_eq!(rep.tables.mape_by_hour.len(), 24);
        assert_eq!(rep.tables.mape_by_size.len(), 3);
        // 2 alphas × 2 interval methods × 24 hours
        assert_eq!(rep.tables.cpd.len(), 96);
        // (none + 4 methods) × 2 m0
        assert_eq!(rep.tables.update_mape.len(), 10);
        assert_eq!(rep.lambda_schedule.len(), 4);
        // OLS with 3 components is defined at m0 = 3 and 12
        assert!(rep.tables.update_mape.iter().all(|r| r.mape.is_finite()));
        assert!(rep.tables.win_counts.is_empty());
    }

    #[test]
    fn two_models_give_wins_and_dm() {
        let panel = synthetic(48, 2, 9);
        let cfg = BacktestConfig {
            update: None,
            models: vec![
                PointModel::Mlfts { k: 2, l: 2 },
                PointModel::parse("factor+mlfts", 2, 2, crate::model::FactorCount::Fixed(1)).unwrap(),
            ],
            ..Default::default()
        };
        let rep = run_backtest(&panel, "all", &cfg).unwrap();
        let hour_wins: usize = rep.tables.win_counts.iter().filter(|r| r.group == "hour").map(|r| r.wins).sum();
        assert_eq!(hour_wins, 24);
        assert_eq!(rep.tables.dm.len(), 1);
    }

    #[test]
    fn tables_are_written() {
        let panel = synthetic(24, 2, 3);
        let rep = run_backtest(&panel, "all", &small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = rep.tables.write_dir(dir.path()).unwrap();
        assert_eq!(files.len(), 8);
        let head = std::fs::read_to_string(dir.path().join("mape_by_hour.csv")).unwrap();
        assert!(head.starts_with("label,method,hour,mape\n"));
        let dm = std::fs::read_to_string(dir.path().join("dm.csv")).unwrap();
        assert_eq!(dm, "label,method_a,method_b,loss,statistic,p_value,degenerate,lag\n");
    }
}
