//! Multivariate time series: ingestion, validation, resampling, differencing,
//! smoothing and chronological splitting.
//!
//! A [`TimeSeries`] holds strictly increasing timestamps, one target channel
//! `y` and `k` covariate channels `x_1..x_k`. Timestamps are plain reals in
//! whatever unit the data uses; nothing here assumes seconds or uniform
//! spacing.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the mandatory timestamp column in CSV files.
pub const TIME_COLUMN: &str = "time";

/// A channel of a [`TimeSeries`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    /// The target `y`.
    Target,
    /// Covariate `x_j`, zero-based.
    Covariate(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    times: Vec<f64>,
    target: Vec<f64>,
    covariates: Vec<Vec<f64>>,
    /// `k + 1` labels, target first.
    names: Vec<String>,
}

impl TimeSeries {
    pub fn new(
        times: Vec<f64>,
        target: Vec<f64>,
        covariates: Vec<Vec<f64>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let m = times.len();
        if m < 2 {
            return Err(Error::TooShort(format!("{m} rows, need at least 2")));
        }
        if target.len() != m {
            return Err(Error::Shape { expected: m, got: target.len() });
        }
        for c in &covariates {
            if c.len() != m {
                return Err(Error::Shape { expected: m, got: c.len() });
            }
        }
        if names.len() != covariates.len() + 1 {
            return Err(Error::Shape {
                expected: covariates.len() + 1,
                got: names.len(),
            });
        }
        let all_finite = times.iter().chain(&target).chain(covariates.iter().flatten()).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Ingest("non-finite value in series".into()));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Ingest(format!(
                "timestamps must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { times, target, covariates, names })
    }

    /// Builds a series with default channel names `y, x1, .., xk`.
    pub fn from_columns(times: Vec<f64>, target: Vec<f64>, covariates: Vec<Vec<f64>>) -> Result<Self> {
        let names = default_names(covariates.len());
        Self::new(times, target, covariates, names)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of covariate channels `k`.
    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn covariate(&self, j: usize) -> &[f64] {
        &self.covariates[j]
    }

    pub fn covariates(&self) -> &[Vec<f64>] {
        &self.covariates
    }

    pub fn channel(&self, channel: Channel) -> &[f64] {
        match channel {
            Channel::Target => &self.target,
            Channel::Covariate(j) => &self.covariates[j],
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn target_name(&self) -> &str {
        &self.names[0]
    }

    pub fn channel_name(&self, channel: Channel) -> &str {
        match channel {
            Channel::Target => &self.names[0],
            Channel::Covariate(j) => &self.names[j + 1],
        }
    }

    pub fn last_index(&self) -> usize {
        self.len() - 1
    }

    /// Covariate values at row `i`.
    pub fn covariate_row(&self, i: usize) -> Vec<f64> {
        self.covariates.iter().map(|c| c[i]).collect()
    }

    /// Contiguous sub-series over `range` (at least two rows).
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.len() || range.start >= range.end {
            return Err(Error::Index(format!("slice {range:?} of series with {} rows", self.len())));
        }
        Self::new(
            self.times[range.clone()].to_vec(),
            self.target[range.clone()].to_vec(),
            self.covariates.iter().map(|c| c[range.clone()].to_vec()).collect(),
            self.names.clone(),
        )
    }

    /// The first `len` rows.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        self.slice(0..len)
    }

    /// Rows at the given ascending indices.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index(format!("row {bad} of series with {} rows", self.len())));
        }
        Self::new(
            indices.iter().map(|&i| self.times[i]).collect(),
            indices.iter().map(|&i| self.target[i]).collect(),
            self.covariates.iter().map(|c| indices.iter().map(|&i| c[i]).collect()).collect(),
            self.names.clone(),
        )
    }

    /// `count` rows ending at `end` taken every `rate` rows, ascending.
    pub fn strided_tail(&self, end: usize, rate: usize, count: usize) -> Result<Self> {
        let reach = (count.saturating_sub(1)) * rate;
        if end >= self.len() || reach > end || rate == 0 {
            return Err(Error::Index(format!(
                "need {count} rows at stride {rate} ending at {end}, series has {} rows",
                self.len()
            )));
        }
        let indices: Vec<usize> = (0..count).rev().map(|k| end - k * rate).collect();
        self.select(&indices)
    }

    /// Appends a row; `time` must exceed the last timestamp.
    pub fn push(&mut self, time: f64, target: f64, covariates: &[f64]) -> Result<()> {
        if covariates.len() != self.covariates.len() {
            return Err(Error::Shape { expected: self.covariates.len(), got: covariates.len() });
        }
        if !(time.is_finite() && target.is_finite() && covariates.iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite row at t={time}: y={target}")));
        }
        let last = self.times[self.len() - 1];
        if time <= last {
            return Err(Error::Ingest(format!("appended time {time} not after {last}")));
        }
        self.times.push(time);
        self.target.push(target);
        for (c, v) in self.covariates.iter_mut().zip(covariates) {
            c.push(*v);
        }
        Ok(())
    }

    /// Mean of the last `count` sampling intervals (fewer if the series is short).
    pub fn recent_mean_dt(&self, count: usize) -> f64 {
        let intervals = (self.len() - 1).min(count.max(1));
        let end = self.len() - 1;
        (self.times[end] - self.times[end - intervals]) / intervals as f64
    }
}

pub(crate) fn default_names(k: usize) -> Vec<String> {
    std::iter::once("y".to_string()).chain((1..=k).map(|j| format!("x{j}"))).collect()
}

/// Trailing-anchored subsampling: `span` most recent rows, every `rate`-th,
/// always keeping the newest row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub span: usize,
    pub rate: usize,
}

impl ResamplePlan {
    pub fn new(span: usize, rate: usize) -> Self {
        Self { span, rate }
    }

    /// Identity plan for a series of length `m`.
    pub fn full(m: usize) -> Self {
        Self { span: m, rate: 1 }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let ok = self.rate >= 1 && self.span <= m && self.span / self.rate >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Plan { span: self.span, rate: self.rate, len: m })
        }
    }

    /// Selected row indices, ascending.
    pub fn indices(&self, m: usize) -> Result<Vec<usize>> {
        self.validate(m)?;
        let oldest = m - self.span;
        let mut idx: Vec<usize> = (0..)
            .map(|k| m as isize - 1 - (k * self.rate) as isize)
            .take_while(|&i| i >= oldest as isize)
            .map(|i| i as usize)
            .collect();
        idx.reverse();
        Ok(idx)
    }
}

pub fn resample(series: &TimeSeries, plan: ResamplePlan) -> Result<TimeSeries> {
    let idx = plan.indices(series.len())?;
    series.select(&idx)
}

/// Chronological train/validation/test split.
///
/// Validation and test get `floor(m * ratio)` rows; the remainder goes to
/// train.
pub fn split(series: &TimeSeries, ratios: (f64, f64, f64)) -> Result<(TimeSeries, TimeSeries, TimeSeries)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let (n_train, n_val, n_test) = split_sizes(series.len(), ratios);
    for (label, n) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
        if n < 2 {
            return Err(Error::TooShort(format!("{label} segment has {n} rows")));
        }
    }
    Ok((
        series.slice(0..n_train)?,
        series.slice(n_train..n_train + n_val)?,
        series.slice(n_train + n_val..series.len())?,
    ))
}

/// Segment lengths used by [`split`].
pub fn split_sizes(m: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let floor = |r: f64| ((m as f64) * r + 1e-9).floor() as usize;
    let n_val = floor(ratios.1);
    let n_test = floor(ratios.2);
    (m - n_val - n_test, n_val, n_test)
}

/// Forward first differences, aligned to the left endpoint of each interval.
pub fn forward_diff(values: &[f64], times: &[f64]) -> Vec<f64> {
    values
        .windows(2)
        .zip(times.windows(2))
        .map(|(v, t)| (v[1] - v[0]) / (t[1] - t[0]))
        .collect()
}

/// Three-point second differences on interior points, valid for uneven spacing.
pub fn second_diff(values: &[f64], times: &[f64]) -> Vec<f64> {
    (1..values.len().saturating_sub(1))
        .map(|i| second_diff_at(values, times, i))
        .collect()
}

pub(crate) fn second_diff_at(values: &[f64], times: &[f64], i: usize) -> f64 {
    let h1 = times[i] - times[i - 1];
    let h2 = times[i + 1] - times[i];
    2.0 * (values[i - 1] / (h1 * (h1 + h2)) - values[i] / (h1 * h2) + values[i + 1] / (h2 * (h1 + h2)))
}

/// Time derivative of the target: order 1 gives `m-1` forward differences,
/// order 2 gives `m-2` central second differences on interior points.
pub fn finite_diff_time(series: &TimeSeries, order: usize) -> Result<Vec<f64>> {
    if !(1..=2).contains(&order) {
        return Err(Error::UnsupportedOrder(order));
    }
    if series.len() < order + 1 {
        return Err(Error::TooShort(format!("{} rows for order {order}", series.len())));
    }
    Ok(match order {
        1 => forward_diff(series.target(), series.times()),
        _ => second_diff(series.target(), series.times()),
    })
}

/// Trailing moving average of every channel over `window` rows.
pub fn moving_average(series: &TimeSeries, window: usize) -> Result<TimeSeries> {
    if window == 0 || window > series.len() {
        return Err(Error::TooShort(format!("window {window} for series of {} rows", series.len())));
    }
    let smooth = |v: &[f64]| -> Vec<f64> {
        v.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    };
    let times = series.times()[window - 1..].to_vec();
    let target = smooth(series.target());
    let covariates = series.covariates().iter().map(|c| smooth(c)).collect();
    // A single surviving row is legitimate here, so bypass the m >= 2 check.
    if times.len() == 1 {
        return Ok(TimeSeries { times, target, covariates, names: series.names().to_vec() });
    }
    TimeSeries::new(times, target, covariates, series.names().to_vec())
}

/// Aligns an irregular source onto `times` by taking, for each requested
/// time, the latest source sample at or before it. Times before the first
/// source sample are an error.
pub fn align_nearest_preceding(times: &[f64], source_times: &[f64], source_values: &[f64]) -> Result<Vec<f64>> {
    if source_times.len() != source_values.len() || source_times.is_empty() {
        return Err(Error::Shape { expected: source_times.len(), got: source_values.len() });
    }
    times
        .iter()
        .map(|&t| {
            let pos = source_times.partition_point(|&s| s <= t);
            if pos == 0 {
                Err(Error::Ingest(format!("no source sample at or before t={t}")))
            } else {
                Ok(source_values[pos - 1])
            }
        })
        .collect()
}

/// Reads a CSV with a mandatory `time` column. Every other column except the
/// target becomes a covariate, in file order. Rows may come in any order.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<TimeSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    read_csv(file, target_column)
}

pub fn read_csv<R: Read>(reader: R, target_column: &str) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let time_col = headers
        .iter()
        .position(|h| h == TIME_COLUMN)
        .ok_or_else(|| Error::Ingest(format!("missing `{TIME_COLUMN}` column")))?;
    let target_col = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Ingest(format!("missing target column `{target_column}`")))?;
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != time_col && c != target_col).collect();

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Ingest(format!("row {} has {} fields, header has {}", r + 1, record.len(), headers.len())));
        }
        let mut row = Vec::with_capacity(headers.len());
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: headers[c].clone(),
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest(format!("non-finite value {field:?} at row {} column `{}`", r + 1, headers[c])));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::TooShort(format!("{} data rows", rows.len())));
    }
    rows.sort_by(|a, b| a[time_col].total_cmp(&b[time_col]));
    if let Some(w) = rows.windows(2).find(|w| w[0][time_col] == w[1][time_col]) {
        return Err(Error::Ingest(format!("duplicate time value {}", w[0][time_col])));
    }
    let times = rows.iter().map(|r| r[time_col]).collect();
    let target = rows.iter().map(|r| r[target_col]).collect();
    let covariates = cov_cols.iter().map(|&c| rows.iter().map(|r| r[c]).collect()).collect();
    let names = std::iter::once(headers[target_col].clone())
        .chain(cov_cols.iter().map(|&c| headers[c].clone()))
        .collect();
    TimeSeries::new(times, target, covariates, names)
}

/// Writes the series as `time,<target>,<covariates..>`.
pub fn write_csv<W: std::io::Write>(series: &TimeSeries, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![TIME_COLUMN.to_string()];
    header.extend(series.names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..series.len() {
        let mut rec = vec![fmt_num(series.times()[i]), fmt_num(series.target()[i])];
        rec.extend(series.covariates().iter().map(|c| fmt_num(c[i])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that round-trips exactly.
pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}
