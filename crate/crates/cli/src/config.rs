//! Run configuration read from TOML.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::Weekday;
use fpnsd_core::eval::dm::DmLoss;
use fpnsd_core::eval::report::{LambdaPolicy, UpdateSettings};
use fpnsd_core::eval::BacktestConfig;
use fpnsd_core::intervals::{IntervalMethod, ThetaPooling};
use fpnsd_core::model::FactorCount;
use fpnsd_core::panel::{parse_weekday, Segmentation};
use fpnsd_core::update::{default_lambda_grid, UpdateMethod, DEFAULT_STACKED_COMPONENTS};
use fpnsd_core::PointModel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

const WEEKDAYS: [Weekday; 7] = [
    Weekday::Mon,
    Weekday::Tue,
    Weekday::Wed,
    Weekday::Thu,
    Weekday::Fri,
    Weekday::Sat,
    Weekday::Sun,
];

/// `"auto"` or a fixed number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOr<V> {
    Auto(String),
    Value(V),
}

impl<V> Default for AutoOr<V> {
    fn default() -> Self {
        AutoOr::Auto("auto".into())
    }
}

impl<V: Copy> AutoOr<V> {
    fn resolve(&self, field: &str) -> CliResult<Option<V>> {
        match self {
            AutoOr::Auto(s) if s.eq_ignore_ascii_case("auto") => Ok(None),
            AutoOr::Auto(s) => Err(CliError::Config(format!("{field}: expected \"auto\" or a number, got \"{s}\""))),
            AutoOr::Value(v) => Ok(Some(*v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_train")]
    pub train: f64,
    #[serde(default = "default_validation")]
    pub validation: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: default_train(),
            validation: default_validation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_update_methods")]
    pub methods: Vec<String>,
    /// Defaults to every `1..p-1`.
    #[serde(default)]
    pub m0: Option<Vec<usize>>,
    #[serde(default)]
    pub lambda: AutoOr<f64>,
    #[serde(default = "default_stacked")]
    pub n_components: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            methods: default_update_methods(),
            m0: None,
            lambda: AutoOr::default(),
            n_components: default_stacked(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Hourly CSV; relative paths are taken from the config file's directory.
    pub data: Option<PathBuf>,
    #[serde(default = "default_segmentation")]
    pub segmentation: String,
    /// Run directory; relative to the config file's directory.
    pub output: Option<PathBuf>,
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    #[serde(default = "six")]
    pub k: usize,
    #[serde(default = "six")]
    pub l: usize,
    #[serde(default)]
    pub q: AutoOr<usize>,
    #[serde(default = "six")]
    pub q_max: usize,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_intervals")]
    pub intervals: Vec<String>,
    #[serde(default = "default_pooling")]
    pub theta_pooling: String,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub update: UpdateConfig,
    #[serde(default = "default_dm_loss")]
    pub dm_loss: String,
    /// Only used by Monte Carlo checks; the pipeline itself is deterministic.
    #[serde(default)]
    pub seed: u64,
}

fn default_train() -> f64 {
    0.5
}
fn default_validation() -> f64 {
    0.25
}
fn yes() -> bool {
    true
}
fn six() -> usize {
    6
}
fn default_stacked() -> usize {
    DEFAULT_STACKED_COMPONENTS
}
fn default_update_methods() -> Vec<String> {
    UpdateMethod::ALL.iter().map(|m| m.code().to_string()).collect()
}
fn default_segmentation() -> String {
    "weekday".into()
}
fn default_models() -> Vec<String> {
    vec!["mlfts".into(), "factor+mlfts".into()]
}
fn default_alphas() -> Vec<f64> {
    vec![0.2, 0.05]
}
fn default_intervals() -> Vec<String> {
    vec!["sd".into(), "conformal".into()]
}
fn default_pooling() -> String {
    "size".into()
}
fn default_dm_loss() -> String {
    "squared".into()
}

/// Which panels to build from the raw series.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmentationChoice {
    /// One panel per listed weekday.
    Weekdays(Vec<Weekday>),
    Single(Segmentation),
}

impl SegmentationChoice {
    /// `(label, segmentation)` per panel.
    pub fn panels(&self) -> Vec<(String, Segmentation)> {
        match self {
            SegmentationChoice::Weekdays(days) => days
                .iter()
                .map(|d| {
                    let seg = Segmentation::Weekday(*d);
                    (fpnsd_core::panel::weekday_code(*d).to_string(), seg)
                })
                .collect(),
            SegmentationChoice::Single(Segmentation::Weekday(d)) => {
                vec![(fpnsd_core::panel::weekday_code(*d).to_string(), Segmentation::Weekday(*d))]
            }
            SegmentationChoice::Single(s) => vec![(s.to_string(), *s)],
        }
    }
}

impl FromStr for SegmentationChoice {
    type Err = CliError;

    /// `weekday` (all seven), `weekday:<day>[,<day>...]`, `day` or `week`.
    fn from_str(s: &str) -> CliResult<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "weekday" || s == "weekdays" {
            return Ok(SegmentationChoice::Weekdays(WEEKDAYS.to_vec()));
        }
        if let Some(list) = s.strip_prefix("weekday:") {
            let days = list
                .split(',')
                .map(|d| parse_weekday(d.trim()).ok_or_else(|| CliError::Config(format!("unknown weekday '{d}'"))))
                .collect::<CliResult<Vec<_>>>()?;
            return Ok(if days.len() == 1 {
                SegmentationChoice::Single(Segmentation::Weekday(days[0]))
            } else {
                SegmentationChoice::Weekdays(days)
            });
        }
        match s.parse::<Segmentation>() {
            Ok(Segmentation::Other) | Err(_) => Err(CliError::Config(format!(
                "segmentation '{s}' (expected weekday, weekday:<day>, day or week)"
            ))),
            Ok(seg) => Ok(SegmentationChoice::Single(seg)),
        }
    }
}

/// Everything a run needs, checked before any computation.
#[derive(Debug, Clone)]
pub struct ValidatedRun {
    pub data: PathBuf,
    pub output: PathBuf,
    pub segmentation: SegmentationChoice,
    pub backtest: BacktestConfig,
}

fn parse_list<V: FromStr<Err = fpnsd_core::Error>>(field: &str, items: &[String]) -> CliResult<Vec<V>> {
    if items.is_empty() {
        return Err(CliError::Config(format!("{field} must not be empty")));
    }
    items
        .iter()
        .map(|s| s.parse::<V>().map_err(|e| CliError::Config(format!("{field}: {e}"))))
        .collect()
}

pub fn factor_count(q: Option<usize>, q_max: usize) -> FactorCount {
    match q {
        Some(q) => FactorCount::Fixed(q),
        None => FactorCount::Auto { q_max },
    }
}

pub fn check_alphas(alphas: &[f64]) -> CliResult<()> {
    if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(CliError::Config(format!("alphas must be non-empty and in (0, 1), got {alphas:?}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self, base: &Path) -> CliResult<ValidatedRun> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::Config("`data` path is required".into()))?;
        let data = base.join(data);
        if !data.is_file() {
            return Err(CliError::Config(format!("data file {} does not exist", data.display())));
        }
        let output = base.join(
            self.output
                .as_ref()
                .ok_or_else(|| CliError::Config("`output` directory is required".into()))?,
        );
        let segmentation: SegmentationChoice = self.segmentation.parse()?;
        let q = factor_count(self.q.resolve("q")?, self.q_max);
        if self.models.is_empty() {
            return Err(CliError::Config("models must not be empty".into()));
        }
        let models = self
            .models
            .iter()
            .map(|m| PointModel::parse(m, self.k, self.l, q).map_err(|e| CliError::Config(e.to_string())))
            .collect::<CliResult<Vec<_>>>()?;
        check_alphas(&self.alphas)?;
        let interval_methods: Vec<IntervalMethod> = parse_list("intervals", &self.intervals)?;
        let pooling: ThetaPooling = self
            .theta_pooling
            .parse()
            .map_err(|e: fpnsd_core::Error| CliError::Config(e.to_string()))?;
        let dm_loss: DmLoss = self
            .dm_loss
            .parse()
            .map_err(|e: fpnsd_core::Error| CliError::Config(e.to_string()))?;
        let SplitConfig { train, validation } = self.split;
        if !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
            return Err(CliError::Config(format!("split {train}/{validation} must be positive and sum below 1")));
        }
        let update = if self.update.enabled {
            let methods: Vec<UpdateMethod> = parse_list("update.methods", &self.update.methods)?;
            let lambda = match self.update.lambda.resolve("update.lambda")? {
                None => LambdaPolicy::Auto,
                Some(v) if v >= 0.0 && v.is_finite() => LambdaPolicy::Fixed(v),
                Some(v) => return Err(CliError::Config(format!("update.lambda must be >= 0, got {v}"))),
            };
            if self.update.n_components == 0 {
                return Err(CliError::Config("update.n_components must be >= 1".into()));
            }
            let points = segmentation.panels()[0].1.points().unwrap_or(24);
            let m0 = match &self.update.m0 {
                Some(list) => {
                    if let Some(bad) = list.iter().find(|&&m| m == 0 || m >= points) {
                        return Err(CliError::Config(format!("update.m0 = {bad} outside 1..{points}")));
                    }
                    list.clone()
                }
                None => (1..points).collect(),
            };
            Some(UpdateSettings {
                methods,
                m0,
                lambda,
                grid: default_lambda_grid(),
                n_components: self.update.n_components,
            })
        } else {
            None
        };
        Ok(ValidatedRun {
            data,
            output,
            segmentation,
            backtest: BacktestConfig {
                models,
                alphas: self.alphas.clone(),
                interval_methods,
                pooling,
                train_share: train,
                validation_share: validation,
                update,
                dm_loss,
            },
        })
    }
}
