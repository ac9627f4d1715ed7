//! Loading panels from disk and executing a full backtest run.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use fpnsd_core::eval::{run_backtest, BacktestConfig, ReportTables};
use fpnsd_core::intervals::write_calibrations;
use fpnsd_core::panel::{interpolate_missing, segment, RawSeries};
use fpnsd_core::update::LambdaSchedule;
use fpnsd_core::FunctionalPanel;
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::SegmentationChoice;
use crate::error::{CliError, CliResult};

pub struct LabelledPanel {
    pub label: String,
    pub panel: FunctionalPanel,
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub hours: usize,
    pub sizes: usize,
    pub interpolated_cells: usize,
}

/// Reads a raw hourly CSV, fills gaps and cuts it into the requested panels.
pub fn load_panels(data: &Path, choice: &SegmentationChoice) -> CliResult<(Vec<LabelledPanel>, IngestSummary)> {
    let raw = RawSeries::read_csv_path(data).map_err(|e| match e {
        fpnsd_core::Error::Io(io) => CliError::io(data, io),
        other => other.into(),
    })?;
    let summary = IngestSummary {
        hours: raw.len(),
        sizes: raw.size_labels().len(),
        interpolated_cells: raw.missing(),
    };
    let filled = interpolate_missing(&raw)?;
    let panels = choice
        .panels()
        .into_iter()
        .map(|(label, seg)| {
            Ok(LabelledPanel {
                label,
                panel: segment(&filled, seg)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok((panels, summary))
}

pub fn read_panel(path: &Path) -> CliResult<FunctionalPanel> {
    FunctionalPanel::read_csv_path(path).map_err(|e| match e {
        fpnsd_core::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn create_file(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Serialize)]
pub struct PanelInfo {
    pub label: String,
    pub curves: usize,
    pub sizes: usize,
    pub points: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub config_sha256: String,
    pub input_sha256: Option<String>,
    pub panels: Vec<PanelInfo>,
    pub ingest: Option<IngestSummary>,
    /// Output file name to data row count.
    pub rows: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
    pub clamped_forecast_cells: usize,
    pub excluded_zero_actuals: usize,
    pub dm_loss: &'static str,
    pub dm_alternative: &'static str,
}

/// Backtests every panel and writes tables, calibrations, the λ schedule,
/// `config.toml` and `manifest.json` into `out`.
pub fn execute(
    panels: &[LabelledPanel],
    config: &BacktestConfig,
    out: &Path,
    config_text: &str,
    input_sha256: Option<String>,
    ingest: Option<IngestSummary>,
) -> CliResult<Manifest> {
    create_dir(out)?;
    let mut tables = ReportTables::default();
    let mut schedule = LambdaSchedule::new();
    let mut rows = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut infos = Vec::new();
    let mut clamped = 0;
    let mut excluded = 0;
    for lp in panels {
        info!("backtesting {} ({} curves)", lp.label, lp.panel.days());
        let report = run_backtest(&lp.panel, &lp.label, config)?;
        for run in &report.runs {
            let name = format!("calibration_{}_{}.csv", lp.label, run.name.replace('+', "-"));
            let path = out.join(&name);
            write_calibrations(create_file(&path)?, &run.calibrations, &report.size_labels)?;
            rows.insert(name, report.size_labels.len() * lp.panel.points());
        }
        infos.push(PanelInfo {
            label: lp.label.clone(),
            curves: lp.panel.days(),
            sizes: lp.panel.sizes(),
            points: lp.panel.points(),
            train: report.split.train().len(),
            validation: report.split.validation().len(),
            test: report.split.test().len(),
        });
        warnings.extend(report.warnings.iter().cloned());
        clamped += report.clamped;
        excluded += report.excluded;
        schedule.merge(report.lambda_schedule);
        tables.extend(report.tables);
    }
    for (name, count) in tables.write_dir(out)? {
        rows.insert(name, count);
    }
    let sched_path = out.join("lambda_schedule.csv");
    schedule.write_csv(create_file(&sched_path)?)?;
    rows.insert("lambda_schedule.csv".into(), schedule.len());
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, config_text).map_err(|e| CliError::io(&cfg_path, e))?;

    let manifest = Manifest {
        tool: "fpnsd",
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: sha256_hex(config_text.as_bytes()),
        input_sha256,
        panels: infos,
        ingest,
        rows,
        warnings,
        clamped_forecast_cells: clamped,
        excluded_zero_actuals: excluded,
        dm_loss: config.dm_loss.code(),
        dm_alternative: "two-sided",
    };
    let man_path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&man_path, text + "\n").map_err(|e| CliError::io(&man_path, e))?;
    Ok(manifest)
}
