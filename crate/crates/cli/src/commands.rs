use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use fpnsd_core::eval::backtest::expanding_window_range;
use fpnsd_core::eval::report::{LambdaPolicy, UpdateSettings};
use fpnsd_core::eval::BacktestConfig;
use fpnsd_core::ffm::{fit_factors, residual_panel, select_q};
use fpnsd_core::fpca::fit_stacked;
use fpnsd_core::intervals::{
    build_interval, level_label, update_intervals, write_calibrations, IntervalCalibration, IntervalMethod,
    ResidualStore, ThetaPooling,
};
use fpnsd_core::model::FactorCount;
use fpnsd_core::panel::{log_transform, to_count_scale, weekday_code, Segmentation};
use fpnsd_core::scorets::ExpSmoothing;
use fpnsd_core::update::{
    block_moving_forecast, build_validation_cases, default_lambda_grid, regression_update, select_lambda_at,
    ts_score_forecasts, ShrinkageMethod, UpdateMethod, ValidationCase,
};
use fpnsd_core::{mlfts, FunctionalPanel, PointModel};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{check_alphas, factor_count, AutoOr, RunConfig, SegmentationChoice, UpdateConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline::{create_dir, create_file, execute, load_panels, read_panel, sha256_hex, LabelledPanel};
use crate::ModelArgs;

fn config_err(e: fpnsd_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn parse_q(q: &str, q_max: usize) -> CliResult<FactorCount> {
    if q.eq_ignore_ascii_case("auto") {
        return Ok(factor_count(None, q_max));
    }
    q.parse::<usize>()
        .map(|v| factor_count(Some(v), q_max))
        .map_err(|_| CliError::Config(format!("--q must be auto or an integer, got '{q}'")))
}

fn point_model(args: &ModelArgs) -> CliResult<PointModel> {
    PointModel::parse(&args.model, args.k, args.l, parse_q(&args.q, args.q_max)?).map_err(config_err)
}

/// Runs `f` against the output file, or stdout when no path is given.
fn with_output(out: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> CliResult<()>) -> CliResult<()> {
    match out {
        Some(path) => {
            let mut w = create_file(path)?;
            f(&mut w)?;
            w.flush().map_err(|e| CliError::io(path, e))
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Core(fpnsd_core::Error::Csv(e))
}

fn panel_label(panel: &FunctionalPanel) -> String {
    match panel.segmentation() {
        Segmentation::Weekday(d) => weekday_code(d).to_string(),
        Segmentation::Other => "all".to_string(),
        s => s.to_string(),
    }
}

pub fn ingest(data: &Path, mode: &str, out: &Path) -> CliResult<()> {
    let choice: SegmentationChoice = mode.parse()?;
    let (panels, summary) = load_panels(data, &choice)?;
    create_dir(out)?;
    println!(
        "read {} hours x {} sizes, interpolated {} missing cells",
        summary.hours, summary.sizes, summary.interpolated_cells
    );
    for lp in &panels {
        let path = out.join(format!("panel_{}.csv", lp.label));
        let mut w = create_file(&path)?;
        lp.panel.write_csv(&mut w)?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
        println!("{}: {} curves of {} points -> {}", lp.label, lp.panel.days(), lp.panel.points(), path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct SizeFit {
    size: f64,
    specific_components: usize,
    variance_proportion: f64,
    degenerate: bool,
}

#[derive(Serialize)]
struct FitSummary {
    model: String,
    curves: usize,
    sizes: usize,
    points: usize,
    factors: usize,
    factor_ratios: Option<Vec<f64>>,
    no_eigen_gap: Option<bool>,
    common_components: usize,
    common_eigenvalues: Vec<f64>,
    per_size: Vec<SizeFit>,
}

pub fn fit(panel_path: &Path, args: &ModelArgs, out: Option<&Path>) -> CliResult<()> {
    let panel = read_panel(panel_path)?;
    let model = point_model(args)?;
    let (mut ratios, mut no_gap) = (None, None);
    if let PointModel::FactorMlfts {
        q: FactorCount::Auto { q_max },
        ..
    } = model
    {
        let q_max = q_max.min(panel.days() - 1);
        if q_max > 0 {
            let sel = select_q(&panel, q_max)?;
            ratios = Some(sel.ratios.to_vec());
            no_gap = Some(sel.no_gap);
        }
    }
    let q = model.factor_count(&panel)?;
    let (k, l) = match model {
        PointModel::Mlfts { k, l } | PointModel::FactorMlfts { k, l, .. } => (k, l),
    };
    let target = if q > 0 {
        residual_panel(&fit_factors(&panel, q)?, &panel)?
    } else {
        panel.clone()
    };
    let m = mlfts::fit(&target, k, l)?;
    let per_size = (0..panel.sizes())
        .map(|s| {
            let vp = m.variance_proportion(s)?;
            Ok(SizeFit {
                size: panel.size_labels()[s],
                specific_components: m.specific[s].n_components(),
                variance_proportion: vp.ratio,
                degenerate: vp.degenerate,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let summary = FitSummary {
        model: model.name().into(),
        curves: panel.days(),
        sizes: panel.sizes(),
        points: panel.points(),
        factors: q,
        factor_ratios: ratios,
        no_eigen_gap: no_gap,
        common_components: m.common.n_components(),
        common_eigenvalues: m.common.eigenvalues.iter().copied().collect(),
        per_size,
    };
    with_output(out, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary).expect("summary serialises");
        writeln!(w).map_err(|e| CliError::io("<output>", e))
    })
}

pub fn forecast(panel_path: &Path, args: &ModelArgs, out: Option<&Path>) -> CliResult<()> {
    let panel = read_panel(panel_path)?;
    let model = point_model(args)?;
    let f = model.forecast(&panel, &ExpSmoothing)?;
    let (counts, _) = to_count_scale(&f);
    with_output(out, |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["size", "hour", "log_value", "count"]).map_err(csv_err)?;
        for (s, label) in panel.size_labels().iter().enumerate() {
            for j in 0..panel.points() {
                wtr.write_record([label.to_string(), j.to_string(), f[(s, j)].to_string(), counts[(s, j)].to_string()])
                    .map_err(csv_err)?;
            }
        }
        wtr.flush().map_err(|e| CliError::io("<output>", e))
    })
}

pub struct UpdateArgs {
    pub panel: PathBuf,
    pub method: String,
    pub m0: usize,
    pub lambda: String,
    pub observed: Option<PathBuf>,
    pub components: usize,
    pub alpha: Vec<f64>,
    pub interval: String,
    pub model: ModelArgs,
    pub out: Option<PathBuf>,
}

/// Observed counts `size,hour,count` as an `S × m0` log-scale matrix.
fn read_observed(path: &Path, labels: &[f64], m0: usize) -> CliResult<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = DMatrix::from_element(labels.len(), m0, f64::NAN);
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let bad = || fpnsd_core::Error::Ingest(format!("bad observed row {rec:?}"));
        let size: f64 = rec.get(0).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let hour: usize = rec.get(1).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let count: f64 = rec.get(2).and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
        let s = labels
            .iter()
            .position(|l| (l - size).abs() < 1e-9)
            .ok_or_else(|| fpnsd_core::Error::Ingest(format!("size {size} is not in the panel")))?;
        if hour < m0 {
            out[(s, hour)] = log_transform(count)?;
        }
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(fpnsd_core::Error::Ingest(format!("observed file must cover hours 0..{} for every size", m0 - 1)).into());
    }
    Ok(out)
}

struct Updater<'a> {
    method: UpdateMethod,
    model: &'a PointModel,
    m0: usize,
}

impl Updater<'_> {
    /// Log-scale forecasts of points `m0..p`, one per case / window.
    fn tails(&self, panel: &FunctionalPanel, cases: &[ValidationCase<f64>], targets: std::ops::Range<usize>, lambda: f64) -> CliResult<Vec<DMatrix<f64>>> {
        if self.method == UpdateMethod::BlockMoving {
            targets
                .map(|w| {
                    let partial = panel.day(w).columns(0, self.m0).into_owned();
                    Ok(block_moving_forecast(&panel.head(w)?, &partial, self.model, &ExpSmoothing)?)
                })
                .collect()
        } else {
            cases
                .iter()
                .map(|c| {
                    let observed = c.observed.columns(0, self.m0).into_owned();
                    Ok(regression_update(self.method, &c.basis, &c.ts_scores, &observed, lambda)?)
                })
                .collect()
        }
    }
}

pub fn update(a: &UpdateArgs) -> CliResult<()> {
    let panel = read_panel(&a.panel)?;
    let method: UpdateMethod = a.method.parse().map_err(config_err)?;
    let model = point_model(&a.model)?;
    let p = panel.points();
    if a.m0 == 0 || a.m0 >= p {
        return Err(CliError::Config(format!("--m0 must lie in 1..{}", p - 1)));
    }
    if !a.alpha.is_empty() {
        check_alphas(&a.alpha)?;
    }
    let interval: IntervalMethod = a.interval.parse().map_err(config_err)?;
    let (history, observed, actual) = match &a.observed {
        Some(path) => (panel.clone(), read_observed(path, panel.size_labels(), a.m0)?, None),
        None => {
            let n = panel.days();
            let last = panel.day(n - 1);
            (panel.head(n - 1)?, last.columns(0, a.m0).into_owned(), Some(last))
        }
    };
    let n_hist = history.days();
    let val_start = (n_hist / 2).max(3);
    let needs_validation = a.lambda.eq_ignore_ascii_case("auto") && method.is_shrinkage() || !a.alpha.is_empty();
    let cases = if needs_validation && method != UpdateMethod::BlockMoving {
        if val_start >= n_hist {
            return Err(fpnsd_core::Error::InsufficientData(format!("{n_hist} curves leave no validation curves")).into());
        }
        build_validation_cases(&history, val_start, n_hist, a.components, &ExpSmoothing)?
    } else {
        Vec::new()
    };
    let lambda = match (method, a.lambda.to_ascii_lowercase().as_str()) {
        (UpdateMethod::Ridge | UpdateMethod::Pls, "auto") => {
            let shrink = if method == UpdateMethod::Ridge { ShrinkageMethod::Ridge } else { ShrinkageMethod::Pls };
            select_lambda_at(&cases, shrink, &default_lambda_grid(), &[a.m0])?[0]
        }
        (_, "auto") => 0.0,
        (_, v) => {
            let l: f64 = v.parse().map_err(|_| CliError::Config(format!("--lambda must be auto or a number, got '{v}'")))?;
            if !(l >= 0.0) {
                return Err(CliError::Config("--lambda must be >= 0".into()));
            }
            l
        }
    };
    let updater = Updater { method, model: &model, m0: a.m0 };
    let tail = if method == UpdateMethod::BlockMoving {
        block_moving_forecast(&history, &observed, &model, &ExpSmoothing)?
    } else {
        let basis = fit_stacked(&history, a.components)?;
        let ts = ts_score_forecasts(&basis, &ExpSmoothing)?;
        regression_update(method, &basis, &ts, &observed, lambda)?
    };
    let (tail_counts, _) = to_count_scale(&tail);

    let mut bands = Vec::new();
    if !a.alpha.is_empty() {
        let targets = val_start..n_hist;
        let fc = updater.tails(&history, &cases, targets.clone(), lambda)?;
        let fc: Vec<_> = fc.iter().map(|m| to_count_scale(m).0).collect();
        let act: Vec<_> = targets
            .map(|w| to_count_scale(&history.day(w).columns(a.m0, p - a.m0).into_owned()).0)
            .collect();
        let mut stores = BTreeMap::new();
        stores.insert(a.m0, ResidualStore::from_pairs(&act, &fc)?);
        for &alpha in &a.alpha {
            bands.push((alpha, update_intervals(&tail_counts, &stores, a.m0, alpha, interval, ThetaPooling::Size)?));
        }
    }

    eprintln!("method {method}, m0 {}, lambda {lambda}", a.m0);
    with_output(a.out.as_deref(), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["size".to_string(), "hour".into(), "forecast".into(), "actual".into()];
        for (alpha, _) in &bands {
            header.push(format!("lower{}", level_label(*alpha)));
            header.push(format!("upper{}", level_label(*alpha)));
        }
        wtr.write_record(&header).map_err(csv_err)?;
        for (s, label) in history.size_labels().iter().enumerate() {
            for j in 0..p - a.m0 {
                let mut row = vec![label.to_string(), (a.m0 + j).to_string(), tail_counts[(s, j)].to_string()];
                row.push(match &actual {
                    Some(day) => to_count_scale(&day.columns(a.m0 + j, 1).into_owned()).0[(s, 0)].to_string(),
                    None => String::new(),
                });
                for (_, iv) in &bands {
                    row.push(iv.lower[(s, j)].to_string());
                    row.push(iv.upper[(s, j)].to_string());
                }
                wtr.write_record(&row).map_err(csv_err)?;
            }
        }
        wtr.flush().map_err(|e| CliError::io("<output>", e))
    })
}

pub fn intervals(
    panel_path: &Path,
    alphas: &[f64],
    method: &str,
    pooling: &str,
    args: &ModelArgs,
    out: &Path,
) -> CliResult<()> {
    check_alphas(alphas)?;
    let panel = read_panel(panel_path)?;
    let model = point_model(args)?;
    let method: IntervalMethod = method.parse().map_err(config_err)?;
    let pooling: ThetaPooling = pooling.parse().map_err(config_err)?;
    let n = panel.days();
    let start = (n / 2).max(3);
    if start + 2 > n {
        return Err(fpnsd_core::Error::InsufficientData(format!("{n} curves leave fewer than 2 validation curves")).into());
    }
    let windows = expanding_window_range(&panel, start, n, |h: &FunctionalPanel| model.forecast(h, &ExpSmoothing))?;
    let act: Vec<_> = windows.iter().map(|w| to_count_scale(&w.actual).0).collect();
    let fc: Vec<_> = windows.iter().map(|w| to_count_scale(&w.forecast).0).collect();
    let store = ResidualStore::from_pairs(&act, &fc)?;
    let cals = alphas
        .iter()
        .map(|&a| IntervalCalibration::fit(&store, a, pooling))
        .collect::<fpnsd_core::Result<Vec<_>>>()?;
    create_dir(out)?;
    let cal_path = out.join("calibration.csv");
    write_calibrations(create_file(&cal_path)?, &cals, panel.size_labels())?;

    let next = to_count_scale(&model.forecast(&panel, &ExpSmoothing)?).0;
    let path = out.join("intervals.csv");
    let mut wtr = csv::Writer::from_writer(create_file(&path)?);
    wtr.write_record(["size", "hour", "alpha", "method", "forecast", "lower", "upper"]).map_err(csv_err)?;
    for cal in &cals {
        let iv = build_interval(&next, cal, method, cal.alpha)?;
        for (s, label) in panel.size_labels().iter().enumerate() {
            for j in 0..panel.points() {
                wtr.write_record([
                    label.to_string(),
                    j.to_string(),
                    cal.alpha.to_string(),
                    method.code().to_string(),
                    next[(s, j)].to_string(),
                    iv.lower[(s, j)].to_string(),
                    iv.upper[(s, j)].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    wtr.flush().map_err(|e| CliError::io(&path, e))?;
    println!("{} validation curves; wrote {} and {}", store.len(), cal_path.display(), path.display());
    Ok(())
}

pub struct BacktestArgs {
    pub data: Option<PathBuf>,
    pub panel: Option<PathBuf>,
    pub mode: String,
    pub methods: Vec<String>,
    pub alphas: Vec<f64>,
    pub k: usize,
    pub l: usize,
    pub q: String,
    pub update_m0: Vec<usize>,
    pub out: Option<PathBuf>,
}

pub fn backtest(a: &BacktestArgs) -> CliResult<()> {
    let q = parse_q(&a.q, 6)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/backtest-{}", chrono::Local::now().format("%Y%m%d-%H%M%S"))));
    let effective = RunConfig {
        data: a.data.clone(),
        segmentation: a.mode.clone(),
        output: Some(out.clone()),
        models: a.methods.clone(),
        k: a.k,
        l: a.l,
        q: match q {
            FactorCount::Fixed(v) => AutoOr::Value(v),
            FactorCount::Auto { .. } => AutoOr::default(),
        },
        q_max: 6,
        alphas: a.alphas.clone(),
        intervals: vec!["sd".into(), "conformal".into()],
        theta_pooling: "size".into(),
        split: Default::default(),
        update: UpdateConfig {
            enabled: !a.update_m0.is_empty(),
            m0: (!a.update_m0.is_empty()).then(|| a.update_m0.clone()),
            ..Default::default()
        },
        dm_loss: "squared".into(),
        seed: 0,
    };
    let config_text = toml::to_string(&effective).map_err(|e| CliError::Config(e.to_string()))?;
    let (panels, ingest, input) = match (&a.data, &a.panel) {
        (Some(data), None) => {
            let choice: SegmentationChoice = a.mode.parse()?;
            let (p, s) = load_panels(data, &choice)?;
            (p, Some(s), Some(data.clone()))
        }
        (None, Some(path)) => {
            let panel = read_panel(path)?;
            (vec![LabelledPanel { label: panel_label(&panel), panel }], None, Some(path.clone()))
        }
        _ => return Err(CliError::Config("give exactly one of --data or --panel".into())),
    };
    check_alphas(&a.alphas)?;
    let models = a
        .methods
        .iter()
        .map(|m| PointModel::parse(m, a.k, a.l, q).map_err(config_err))
        .collect::<CliResult<Vec<_>>>()?;
    let points = panels[0].panel.points();
    if let Some(bad) = a.update_m0.iter().find(|&&m| m == 0 || m >= points) {
        return Err(CliError::Config(format!("--update-m0 {bad} outside 1..{points}")));
    }
    let config = BacktestConfig {
        models,
        alphas: a.alphas.clone(),
        update: (!a.update_m0.is_empty()).then(|| UpdateSettings {
            m0: a.update_m0.clone(),
            lambda: LambdaPolicy::Auto,
            ..Default::default()
        }),
        ..Default::default()
    };
    let input_sha = match &input {
        Some(p) => Some(sha256_hex(&fs::read(p).map_err(|e| CliError::io(p, e))?)),
        None => None,
    };
    let manifest = execute(&panels, &config, &out, &config_text, input_sha, ingest)?;
    print_run_summary(&out, &manifest);
    Ok(())
}

fn print_run_summary(out: &Path, manifest: &crate::pipeline::Manifest) {
    println!("run directory: {}", out.display());
    for p in &manifest.panels {
        println!("  {}: {} curves (train {}, validation {}, test {})", p.label, p.curves, p.train, p.validation, p.test);
    }
    if !manifest.warnings.is_empty() {
        println!("  {} warnings (see manifest.json)", manifest.warnings.len());
    }
}

pub fn run(config_path: &Path) -> CliResult<()> {
    let text = fs::read_to_string(config_path).map_err(|e| CliError::Config(format!("{}: {e}", config_path.display())))?;
    let config = RunConfig::from_toml(&text)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let valid = config.validate(base)?;
    let (panels, ingest) = load_panels(&valid.data, &valid.segmentation)?;
    let input_sha = sha256_hex(&fs::read(&valid.data).map_err(|e| CliError::io(&valid.data, e))?);
    let manifest = execute(&panels, &valid.backtest, &valid.output, &text, Some(input_sha), Some(ingest))?;
    print_run_summary(&valid.output, &manifest);
    Ok(())
}

#[derive(Deserialize)]
struct HourRow {
    label: String,
    method: String,
    mape: f64,
}

#[derive(Deserialize)]
struct CpdRow {
    method: String,
    interval: String,
    alpha: f64,
    cpd: f64,
}

#[derive(Deserialize)]
struct UpdRow {
    method: String,
    m0: usize,
    mape: f64,
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<R>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Core(fpnsd_core::Error::Ingest(format!("{}: {other:?}", path.display()))),
    })?;
    rdr.deserialize().collect::<Result<Vec<R>, _>>().map_err(csv_err)
}

fn mean(v: &[f64]) -> f64 {
    let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if f.is_empty() {
        f64::NAN
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

pub fn report(run: &Path) -> CliResult<()> {
    let hours: Vec<HourRow> = read_rows(&run.join("mape_by_hour.csv"))?;
    let mut by: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in hours {
        by.entry((r.label, r.method)).or_default().push(r.mape);
    }
    println!("Mean MAPE (%) by label and method");
    println!("{:<8} {:<14} {:>10}", "label", "method", "mape");
    for ((label, method), v) in &by {
        println!("{label:<8} {method:<14} {:>10.3}", mean(v));
    }

    let cpd: Vec<CpdRow> = read_rows(&run.join("cpd.csv"))?;
    let mut by: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in cpd {
        by.entry((r.method, r.interval, level_label(r.alpha))).or_default().push(r.cpd);
    }
    println!("\nMean CPD by method, interval and level");
    for ((method, interval, level), v) in &by {
        println!("{method:<14} {interval:<10} {level:>3}% {:>10.4}", mean(v));
    }

    let upd_path = run.join("update_mape.csv");
    if upd_path.exists() {
        let upd: Vec<UpdRow> = read_rows(&upd_path)?;
        if !upd.is_empty() {
            let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut m0s: BTreeMap<usize, ()> = BTreeMap::new();
            for r in &upd {
                by.entry(r.method.clone()).or_default().push(r.mape);
                m0s.insert(r.m0, ());
            }
            println!("\nMean updated MAPE (%) over {} values of m0", m0s.len());
            for (method, v) in &by {
                println!("{method:<8} {:>10.3}", mean(v));
            }
        }
    }
    Ok(())
}
