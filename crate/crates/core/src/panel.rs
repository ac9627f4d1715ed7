//! Raw hourly series, the log transform, and segmentation into functional panels.
//!
//! A [`FunctionalPanel`] holds `S` functional time series (one per particle size)
//! of `n` curves observed on the same `p`-point intraday grid. Integrals over the
//! grid always use the panel's trapezoidal quadrature weights.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike, Weekday};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Minimum number of curves needed to fit any model.
pub const MIN_CURVES: usize = 3;

/// `log10(count + 1)`.
pub fn log_transform<T: Real>(count: T) -> Result<T> {
    if !count.is_finite() || count < T::zero() {
        return Err(Error::Domain(format!(
            "log transform needs a finite non-negative count, got {count}"
        )));
    }
    Ok((count + T::one()).log10())
}

/// `10^x - 1`, clamped at zero. The flag reports whether clamping happened.
pub fn inverse_transform<T: Real>(x: T) -> (T, bool) {
    let v = T::lit(10.0).powf(x) - T::one();
    if v < T::zero() {
        (T::zero(), true)
    } else {
        (v, false)
    }
}

/// Applies [`inverse_transform`] elementwise and counts clamped cells.
pub fn to_count_scale<T: Real>(m: &DMatrix<T>) -> (DMatrix<T>, usize) {
    let mut clamped = 0;
    let out = m.map(|x| {
        let (v, c) = inverse_transform(x);
        clamped += c as usize;
        v
    });
    (out, clamped)
}

/// Trapezoidal quadrature weights for a strictly increasing grid.
///
/// The weights sum to `grid[p-1] - grid[0]`. A single-point grid gets weight 1.
pub fn trapezoid_weights<T: Real>(grid: &[T]) -> Vec<T> {
    let p = grid.len();
    if p == 1 {
        return vec![T::one()];
    }
    let half = T::lit(0.5);
    let mut w = vec![T::zero(); p];
    for j in 0..p - 1 {
        let h = grid[j + 1] - grid[j];
        w[j] += half * h;
        w[j + 1] += half * h;
    }
    w
}

/// How a long hourly series is cut into curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segmentation {
    /// One 24-hour curve per week, taken from the given weekday.
    Weekday(Weekday),
    /// One 24-hour curve per consecutive day.
    Day,
    /// One 168-hour curve per Monday-to-Sunday week.
    Week,
    /// Curves built in memory (synthetic data, re-blocked panels, residuals).
    Other,
}

impl Segmentation {
    /// Points per curve.
    pub fn points(&self) -> Option<usize> {
        match self {
            Segmentation::Weekday(_) | Segmentation::Day => Some(24),
            Segmentation::Week => Some(168),
            Segmentation::Other => None,
        }
    }
}

pub fn weekday_code(d: Weekday) -> &'static str {
    match d {
        Weekday::Mon => "mon",
        Weekday::Tue => "tue",
        Weekday::Wed => "wed",
        Weekday::Thu => "thu",
        Weekday::Fri => "fri",
        Weekday::Sat => "sat",
        Weekday::Sun => "sun",
    }
}

pub fn parse_weekday(s: &str) -> Option<Weekday> {
    match s.to_ascii_lowercase().as_str() {
        "mon" | "monday" => Some(Weekday::Mon),
        "tue" | "tuesday" => Some(Weekday::Tue),
        "wed" | "wednesday" => Some(Weekday::Wed),
        "thu" | "thursday" => Some(Weekday::Thu),
        "fri" | "friday" => Some(Weekday::Fri),
        "sat" | "saturday" => Some(Weekday::Sat),
        "sun" | "sunday" => Some(Weekday::Sun),
        _ => None,
    }
}

impl fmt::Display for Segmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segmentation::Weekday(d) => write!(f, "weekday:{}", weekday_code(*d)),
            Segmentation::Day => f.write_str("day"),
            Segmentation::Week => f.write_str("week"),
            Segmentation::Other => f.write_str("other"),
        }
    }
}

impl FromStr for Segmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "day" => Ok(Segmentation::Day),
            "week" => Ok(Segmentation::Week),
            "other" => Ok(Segmentation::Other),
            _ => s
                .strip_prefix("weekday:")
                .and_then(parse_weekday)
                .map(Segmentation::Weekday)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unknown segmentation '{s}' (expected weekday:<mon..sun>, day or week)"
                    ))
                }),
        }
    }
}

/// Hourly particle counts for `S` sizes, possibly with missing cells.
#[derive(Debug, Clone)]
pub struct RawSeries<T> {
    timestamps: Vec<NaiveDateTime>,
    /// One column per size, each as long as `timestamps`.
    counts: Vec<Vec<Option<T>>>,
    size_labels: Vec<f64>,
}

impl<T: Real> RawSeries<T> {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        counts: Vec<Vec<Option<T>>>,
        size_labels: Vec<f64>,
    ) -> Result<Self> {
        if counts.is_empty() || counts.len() != size_labels.len() {
            return Err(Error::Ingest(format!(
                "need S >= 1 count columns matching {} size labels, got {}",
                size_labels.len(),
                counts.len()
            )));
        }
        if size_labels.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Ingest("size labels must be strictly increasing".into()));
        }
        for (s, col) in counts.iter().enumerate() {
            if col.len() != timestamps.len() {
                return Err(Error::Ingest(format!(
                    "size {} has {} rows, expected {}",
                    size_labels[s],
                    col.len(),
                    timestamps.len()
                )));
            }
            if let Some(bad) = col.iter().flatten().find(|v| !v.is_finite() || **v < T::zero()) {
                return Err(Error::Domain(format!(
                    "size {}: count {bad} is negative or non-finite",
                    size_labels[s]
                )));
            }
        }
        for w in timestamps.windows(2) {
            if w[1] - w[0] != Duration::hours(1) {
                return Err(Error::Ingest(format!(
                    "timestamps must be hourly and strictly increasing ({} -> {})",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self {
            timestamps,
            counts,
            size_labels,
        })
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn counts(&self) -> &[Vec<Option<T>>] {
        &self.counts
    }

    pub fn size_labels(&self) -> &[f64] {
        &self.size_labels
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn missing(&self) -> usize {
        self.counts.iter().flatten().filter(|v| v.is_none()).count()
    }
}

impl RawSeries<f64> {
    /// Reads the hourly input CSV (`timestamp,<size_1>,...,<size_S>`).
    ///
    /// Empty cells are missing. Hours absent from the file are inserted as
    /// missing rows so that the result is hourly-spaced.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 {
            return Err(Error::Ingest(
                "header must be timestamp followed by at least one size column".into(),
            ));
        }
        let size_labels = headers
            .iter()
            .skip(1)
            .map(|h| {
                h.trim_end_matches("nm")
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Ingest(format!("size label '{h}' is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        let s_count = size_labels.len();
        let mut timestamps: Vec<NaiveDateTime> = Vec::new();
        let mut counts: Vec<Vec<Option<f64>>> = vec![Vec::new(); s_count];
        for (row_idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = row_idx + 2;
            let ts = parse_timestamp(rec.get(0).unwrap_or(""))
                .ok_or_else(|| Error::Ingest(format!("line {line}: bad timestamp")))?;
            if ts.minute() != 0 || ts.second() != 0 {
                return Err(Error::Ingest(format!(
                    "line {line}: timestamp {ts} is not on the hour"
                )));
            }
            if let Some(&last) = timestamps.last() {
                if ts <= last {
                    return Err(Error::Ingest(format!(
                        "line {line}: timestamp {ts} does not increase"
                    )));
                }
                let mut fill = last + Duration::hours(1);
                while fill < ts {
                    timestamps.push(fill);
                    counts.iter_mut().for_each(|c| c.push(None));
                    fill += Duration::hours(1);
                }
            }
            timestamps.push(ts);
            for (s, col) in counts.iter_mut().enumerate() {
                let cell = rec.get(s + 1).unwrap_or("").trim();
                if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                    col.push(None);
                } else {
                    let v = cell.parse::<f64>().map_err(|_| {
                        Error::Ingest(format!("line {line}: value '{cell}' is not a number"))
                    })?;
                    col.push(Some(v));
                }
            }
        }
        Self::new(timestamps, counts, size_labels)
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(BufReader::new(f))
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_local());
    }
    const FORMATS: [&str; 5] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%SZ",
    ];
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Fills gaps by straight-line interpolation between the nearest observed
/// neighbours; leading and trailing gaps copy the nearest observed value.
pub fn interpolate_missing<T: Real>(series: &RawSeries<T>) -> Result<RawSeries<T>> {
    let mut counts = Vec::with_capacity(series.counts.len());
    for (s, col) in series.counts.iter().enumerate() {
        let observed: Vec<usize> = (0..col.len()).filter(|&i| col[i].is_some()).collect();
        if observed.len() < 2 {
            return Err(Error::Ingest(format!(
                "size {} has {} observed values; interpolation needs at least 2",
                series.size_labels[s],
                observed.len()
            )));
        }
        let mut out: Vec<Option<T>> = col.clone();
        let first = observed[0];
        let last = *observed.last().unwrap();
        let first_v = col[first].unwrap();
        let last_v = col[last].unwrap();
        out[..first].iter_mut().for_each(|c| *c = Some(first_v));
        out[last + 1..].iter_mut().for_each(|c| *c = Some(last_v));
        for pair in observed.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b - a < 2 {
                continue;
            }
            let va = col[a].unwrap();
            let vb = col[b].unwrap();
            let span = T::from_count(b - a);
            for (i, cell) in out.iter_mut().enumerate().take(b).skip(a + 1) {
                let frac = T::from_count(i - a) / span;
                *cell = Some(va + (vb - va) * frac);
            }
        }
        counts.push(out);
    }
    Ok(RawSeries {
        timestamps: series.timestamps.clone(),
        counts,
        size_labels: series.size_labels.clone(),
    })
}

/// Cuts a gap-free hourly series into log-scale curves.
///
/// Partial segments at either end are dropped.
pub fn segment<T: Real>(series: &RawSeries<T>, mode: Segmentation) -> Result<FunctionalPanel<T>> {
    if series.missing() > 0 {
        return Err(Error::Ingest(format!(
            "{} missing cells remain; interpolate before segmenting",
            series.missing()
        )));
    }
    let p = mode.points().ok_or_else(|| {
        Error::InvalidArgument("segmentation mode must be weekday, day or week".into())
    })?;
    let starts_ok = |ts: &NaiveDateTime| -> bool {
        ts.hour() == 0
            && match mode {
                Segmentation::Weekday(d) => ts.weekday() == d,
                Segmentation::Week => ts.weekday() == Weekday::Mon,
                _ => true,
            }
    };
    let stride = match mode {
        Segmentation::Weekday(_) => 168,
        _ => p,
    };
    let ts = &series.timestamps;
    let mut starts = Vec::new();
    if let Some(first) = ts.iter().position(starts_ok) {
        let mut i = first;
        while i + p <= ts.len() {
            starts.push(i);
            i += stride;
        }
    }
    let n = starts.len();
    if n < MIN_CURVES {
        return Err(Error::InsufficientData(format!(
            "{mode} segmentation yields {n} complete curves; at least {MIN_CURVES} are needed"
        )));
    }
    let mut values = Vec::with_capacity(series.counts.len());
    for col in &series.counts {
        let mut m = DMatrix::zeros(n, p);
        for (t, &start) in starts.iter().enumerate() {
            for j in 0..p {
                m[(t, j)] = log_transform(col[start + j].unwrap())?;
            }
        }
        values.push(m);
    }
    let start_times = starts.iter().map(|&i| ts[i]).collect();
    FunctionalPanel::new(values, series.size_labels.clone(), mode)
        .map(|panel| panel.with_starts(start_times))
}

/// `S` functional time series of `n` log-scale curves on a common `p`-point grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionalPanel<T: Real> {
    /// One `n × p` matrix per size; row `t` is curve `t`.
    values: Vec<DMatrix<T>>,
    grid: Vec<T>,
    quad_weights: Vec<T>,
    size_labels: Vec<f64>,
    segmentation: Segmentation,
    /// Start instant of each curve, when the panel came from timestamps.
    starts: Vec<NaiveDateTime>,
}

impl<T: Real> FunctionalPanel<T> {
    /// Builds a panel on the hourly grid `0, 1, ..., p-1`.
    pub fn new(
        values: Vec<DMatrix<T>>,
        size_labels: Vec<f64>,
        segmentation: Segmentation,
    ) -> Result<Self> {
        let p = values.first().map(|m| m.ncols()).unwrap_or(0);
        let grid = (0..p).map(T::from_count).collect();
        Self::with_grid(values, grid, size_labels, segmentation)
    }

    pub fn with_grid(
        values: Vec<DMatrix<T>>,
        grid: Vec<T>,
        size_labels: Vec<f64>,
        segmentation: Segmentation,
    ) -> Result<Self> {
        let first = values
            .first()
            .ok_or_else(|| Error::Shape("panel needs at least one size".into()))?;
        let (n, p) = first.shape();
        if p == 0 || n == 0 {
            return Err(Error::Shape("panel must have n >= 1 curves and p >= 1 points".into()));
        }
        if values.iter().any(|m| m.shape() != (n, p)) {
            return Err(Error::Shape("all sizes must share the same n × p shape".into()));
        }
        if size_labels.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} size labels for {} sizes",
                size_labels.len(),
                values.len()
            )));
        }
        if grid.len() != p || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Shape("grid must be strictly increasing with p points".into()));
        }
        if let Some(expected) = segmentation.points() {
            if expected != p {
                return Err(Error::Shape(format!(
                    "{segmentation} segmentation needs p = {expected}, got {p}"
                )));
            }
        }
        if values.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Domain("panel values must be finite".into()));
        }
        let quad_weights = trapezoid_weights(&grid);
        Ok(Self {
            values,
            grid,
            quad_weights,
            size_labels,
            segmentation,
            starts: Vec::new(),
        })
    }

    /// Attaches curve start instants (ignored unless one per curve).
    pub fn with_starts(mut self, starts: Vec<NaiveDateTime>) -> Self {
        if starts.len() == self.days() {
            self.starts = starts;
        }
        self
    }

    /// Same metadata, new values of identical shape.
    pub fn with_values(&self, values: Vec<DMatrix<T>>) -> Result<Self> {
        let mut out = Self::with_grid(
            values,
            self.grid.clone(),
            self.size_labels.clone(),
            self.segmentation,
        )?;
        if out.days() == self.days() {
            out.starts = self.starts.clone();
        }
        Ok(out)
    }

    pub fn sizes(&self) -> usize {
        self.values.len()
    }

    pub fn days(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn points(&self) -> usize {
        self.values[0].ncols()
    }

    pub fn values(&self) -> &[DMatrix<T>] {
        &self.values
    }

    pub fn size_values(&self, s: usize) -> &DMatrix<T> {
        &self.values[s]
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn quad_weights(&self) -> &[T] {
        &self.quad_weights
    }

    pub fn size_labels(&self) -> &[f64] {
        &self.size_labels
    }

    pub fn segmentation(&self) -> Segmentation {
        self.segmentation
    }

    pub fn starts(&self) -> &[NaiveDateTime] {
        &self.starts
    }

    pub fn curve(&self, s: usize, t: usize) -> DVector<T> {
        self.values[s].row(t).transpose()
    }

    /// The first `w` curves of every size.
    pub fn head(&self, w: usize) -> Result<Self> {
        if w == 0 || w > self.days() {
            return Err(Error::OutOfRange {
                index: w,
                len: self.days(),
            });
        }
        let values = self.values.iter().map(|m| m.rows(0, w).into_owned()).collect();
        let mut out = Self::with_grid(
            values,
            self.grid.clone(),
            self.size_labels.clone(),
            self.segmentation,
        )?;
        if !self.starts.is_empty() {
            out.starts = self.starts[..w].to_vec();
        }
        Ok(out)
    }

    /// Day `t` of every size as an `S × p` matrix.
    pub fn day(&self, t: usize) -> DMatrix<T> {
        let (s_count, p) = (self.sizes(), self.points());
        DMatrix::from_fn(s_count, p, |s, j| self.values[s][(t, j)])
    }

    /// `n × (S·p)` matrix whose row `t` stacks the curves of all sizes.
    pub fn stacked(&self) -> DMatrix<T> {
        let (n, p) = (self.days(), self.points());
        let mut out = DMatrix::zeros(n, self.sizes() * p);
        for (s, m) in self.values.iter().enumerate() {
            out.columns_mut(s * p, p).copy_from(m);
        }
        out
    }

    /// Quadrature inner product of two curves on this grid.
    pub fn inner(&self, a: &[T], b: &[T]) -> T {
        self.quad_weights
            .iter()
            .zip(a.iter().zip(b))
            .fold(T::zero(), |acc, (&w, (&x, &y))| acc + w * x * y)
    }

    /// Writes the `size,day,hour,value` layout, preceded by `#` metadata lines.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# fpnsd-panel v1")?;
        writeln!(w, "# segmentation={}", self.segmentation)?;
        if !self.starts.is_empty() {
            let s: Vec<String> = self
                .starts
                .iter()
                .map(|t| t.format("%Y-%m-%dT%H:%M:%S").to_string())
                .collect();
            writeln!(w, "# starts={}", s.join(";"))?;
        }
        writeln!(w, "size,day,hour,value")?;
        for (s, m) in self.values.iter().enumerate() {
            for t in 0..self.days() {
                for j in 0..self.points() {
                    writeln!(w, "{},{},{},{}", self.size_labels[s], t + 1, j, m[(t, j)])?;
                }
            }
        }
        Ok(())
    }
}

impl FunctionalPanel<f64> {
    /// Reads a panel written by [`FunctionalPanel::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut buf = BufReader::new(reader);
        let mut segmentation = Segmentation::Other;
        let mut starts = Vec::new();
        let mut body = String::new();
        let mut line = String::new();
        while buf.read_line(&mut line)? > 0 {
            if let Some(meta) = line.trim_end().strip_prefix('#') {
                let meta = meta.trim();
                if let Some(v) = meta.strip_prefix("segmentation=") {
                    segmentation = v.parse()?;
                } else if let Some(v) = meta.strip_prefix("starts=") {
                    starts = v
                        .split(';')
                        .map(|s| {
                            NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").map_err(|_| {
                                Error::Ingest(format!("bad start timestamp '{s}'"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                }
            } else {
                body.push_str(&line);
            }
            line.clear();
        }
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let mut cells: Vec<(f64, usize, usize, f64)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let parse_err = || Error::Ingest(format!("bad panel row: {rec:?}"));
            cells.push((
                field(0).parse().map_err(|_| parse_err())?,
                field(1).parse().map_err(|_| parse_err())?,
                field(2).parse().map_err(|_| parse_err())?,
                field(3).parse().map_err(|_| parse_err())?,
            ));
        }
        let mut labels: Vec<f64> = cells.iter().map(|c| c.0).collect();
        labels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        labels.dedup();
        let n = cells.iter().map(|c| c.1).max().unwrap_or(0);
        let p = cells.iter().map(|c| c.2 + 1).max().unwrap_or(0);
        if n == 0 || p == 0 || cells.len() != labels.len() * n * p {
            return Err(Error::Ingest(format!(
                "panel file has {} rows, expected S·n·p = {}·{}·{}",
                cells.len(),
                labels.len(),
                n,
                p
            )));
        }
        let mut values = vec![DMatrix::from_element(n, p, f64::NAN); labels.len()];
        for (label, day, hour, v) in cells {
            let s = labels.iter().position(|&l| l == label).unwrap();
            if day == 0 {
                return Err(Error::Ingest("panel days are 1-based".into()));
            }
            values[s][(day - 1, hour)] = v;
        }
        Ok(Self::new(values, labels, segmentation)?.with_starts(starts))
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// The first `m0` log-scale observations of a curve that is still arriving.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialDay<T> {
    observed: Vec<T>,
}

impl<T: Real> PartialDay<T> {
    /// `p` is the full curve length; `1 <= observed.len() < p` is required.
    pub fn new(observed: Vec<T>, p: usize) -> Result<Self> {
        if observed.is_empty() || observed.len() >= p {
            return Err(Error::InvalidArgument(format!(
                "partial day needs 1 <= m0 < p = {p}, got m0 = {}",
                observed.len()
            )));
        }
        if observed.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("partial-day values must be finite".into()));
        }
        Ok(Self { observed })
    }

    pub fn m0(&self) -> usize {
        self.observed.len()
    }

    pub fn observed(&self) -> &[T] {
        &self.observed
    }
}
