//! Forward-Euler forecasting with a learned time derivative, plus the
//! relative squared error metric.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pblock::PBlock;
use crate::series::TimeSeries;

/// Number of trailing intervals averaged to extend timestamps.
pub const DT_WINDOW: usize = 5;

/// Anything that yields the LHS time derivative at a series index.
pub trait DerivativeModel: Sync {
    /// 1 for `dy/dt`, 2 for `d²y/dt²`.
    fn lhs_order(&self) -> usize;

    /// Trailing rows (ending at the index, inclusive) read by one evaluation
    /// at stride 1.
    fn min_history(&self) -> usize;

    fn evaluate(&self, series: &TimeSeries, index: usize) -> Result<f64>;

    /// Evaluation on the view `index, index - rate, ..` of `min_history`
    /// rows.
    fn evaluate_strided(&self, series: &TimeSeries, index: usize, rate: usize) -> Result<f64> {
        let view = series.strided_tail(index, rate, self.min_history())?;
        self.evaluate(&view, view.last_index())
    }
}

impl<T: DerivativeModel + ?Sized> DerivativeModel for &T {
    fn lhs_order(&self) -> usize {
        (**self).lhs_order()
    }

    fn min_history(&self) -> usize {
        (**self).min_history()
    }

    fn evaluate(&self, series: &TimeSeries, index: usize) -> Result<f64> {
        (**self).evaluate(series, index)
    }

    fn evaluate_strided(&self, series: &TimeSeries, index: usize, rate: usize) -> Result<f64> {
        (**self).evaluate_strided(series, index, rate)
    }
}

impl DerivativeModel for PBlock {
    fn lhs_order(&self) -> usize {
        PBlock::lhs_order(self)
    }

    fn min_history(&self) -> usize {
        self.window()
    }

    fn evaluate(&self, series: &TimeSeries, index: usize) -> Result<f64> {
        PBlock::evaluate(self, series, index)
    }

    fn evaluate_strided(&self, series: &TimeSeries, index: usize, rate: usize) -> Result<f64> {
        PBlock::evaluate_strided(self, series, index, rate)
    }
}

/// A model defined by a closure, for fixtures and experiments.
#[derive(Clone)]
pub struct FnModel<F> {
    pub order: usize,
    pub history: usize,
    pub f: F,
}

impl<F> FnModel<F>
where
    F: Fn(&TimeSeries, usize) -> f64 + Sync,
{
    pub fn new(order: usize, history: usize, f: F) -> Self {
        Self { order, history, f }
    }
}

impl<F> DerivativeModel for FnModel<F>
where
    F: Fn(&TimeSeries, usize) -> f64 + Sync,
{
    fn lhs_order(&self) -> usize {
        self.order
    }

    fn min_history(&self) -> usize {
        self.history
    }

    fn evaluate(&self, series: &TimeSeries, index: usize) -> Result<f64> {
        if index >= series.len() || index + 1 < self.history {
            return Err(Error::Index(format!("index {index} with history {}", self.history)));
        }
        Ok((self.f)(series, index))
    }
}

/// Next target value from the last row of `series`.
///
/// Order 1: `y + F·dt`. Order 2: the velocity is the backward difference of
/// the last two rows, `v' = v + F·dt`, `y' = y + v'·dt`.
pub fn euler_step<M: DerivativeModel + ?Sized>(model: &M, series: &TimeSeries, dt: f64) -> Result<f64> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let last = series.last_index();
    let f = model.evaluate(series, last)?;
    if !f.is_finite() {
        return Err(Error::Numeric(format!("non-finite derivative at row {last} (t = {})", series.times()[last])));
    }
    let y = series.target()[last];
    let next = match model.lhs_order() {
        1 => y + f * dt,
        2 => {
            let (t, ys) = (series.times(), series.target());
            let v = (ys[last] - ys[last - 1]) / (t[last] - t[last - 1]);
            y + (v + f * dt) * dt
        }
        other => return Err(Error::UnsupportedOrder(other)),
    };
    if next.is_finite() {
        Ok(next)
    } else {
        Err(Error::Numeric(format!("non-finite state after step from row {last}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariatePolicy {
    /// Repeat the last observed covariate values.
    HoldLast,
    /// Read future covariates from the series rows after the anchor.
    Provided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Each step starts from the true history up to the previous row.
    Single,
    /// Predictions are fed back as history.
    Multi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub covariates: CovariatePolicy,
    pub mode: Mode,
}

impl RolloutConfig {
    pub fn new(horizon: usize, mode: Mode) -> Self {
        Self { horizon, covariates: CovariatePolicy::HoldLast, mode }
    }

    pub fn with_covariates(mut self, policy: CovariatePolicy) -> Self {
        self.covariates = policy;
        self
    }
}

/// Predicted values with the timestamps they were stepped to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Forecasts `horizon` values after row `anchor`, using rows `..=anchor`
/// as history. Single-step mode additionally reads the true rows up to
/// `anchor + horizon - 1`; provided covariates need rows up to
/// `anchor + horizon`.
pub fn rollout<M: DerivativeModel + ?Sized>(
    model: &M,
    series: &TimeSeries,
    anchor: usize,
    config: &RolloutConfig,
) -> Result<Forecast> {
    if config.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let need = model.min_history().max(model.lhs_order());
    if anchor >= series.len() || anchor + 1 < need {
        return Err(Error::Index(format!(
            "anchor {anchor} needs {need} rows of history in a series of {} rows",
            series.len()
        )));
    }
    let reach = match (config.mode, config.covariates) {
        (_, CovariatePolicy::Provided) => anchor + config.horizon,
        (Mode::Single, CovariatePolicy::HoldLast) => anchor + config.horizon - 1,
        (Mode::Multi, CovariatePolicy::HoldLast) => anchor,
    };
    if reach >= series.len() {
        return Err(Error::Config(format!(
            "horizon {} from anchor {anchor} needs row {reach}, series has {} rows",
            config.horizon,
            series.len()
        )));
    }
    let mut out = Forecast { times: Vec::with_capacity(config.horizon), values: Vec::with_capacity(config.horizon) };
    let fail = |step: usize, out: &Forecast, source: Error| Error::Rollout {
        step,
        partial: out.values.clone(),
        source: Box::new(source),
    };
    match config.mode {
        Mode::Single => {
            for step in 0..config.horizon {
                let prefix = series.prefix(anchor + step + 1).map_err(|e| fail(step, &out, e))?;
                let dt = prefix.recent_mean_dt(DT_WINDOW);
                let y = euler_step(model, &prefix, dt).map_err(|e| fail(step, &out, e))?;
                out.times.push(prefix.times()[prefix.last_index()] + dt);
                out.values.push(y);
            }
        }
        Mode::Multi => {
            // Only the trailing rows matter to the model and the dt rule.
            let keep = need.max(DT_WINDOW + 1).min(anchor + 1);
            let mut work = series.slice(anchor + 1 - keep..anchor + 1).map_err(|e| fail(0, &out, e))?;
            for step in 0..config.horizon {
                let dt = work.recent_mean_dt(DT_WINDOW);
                let y = euler_step(model, &work, dt).map_err(|e| fail(step, &out, e))?;
                let t = work.times()[work.last_index()] + dt;
                let covariates = match config.covariates {
                    CovariatePolicy::HoldLast => work.covariate_row(work.last_index()),
                    CovariatePolicy::Provided => series.covariate_row(anchor + step + 1),
                };
                work.push(t, y, &covariates).map_err(|e| fail(step, &out, e))?;
                out.times.push(t);
                out.values.push(y);
            }
        }
    }
    Ok(out)
}

/// Relative squared error `Σ(ŷ - y)² / Σ y²`.
pub fn rmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    let (num, den) = error_sums(predictions, truth)?;
    if den == 0.0 {
        return Err(Error::DegenerateMetric);
    }
    Ok(num / den)
}

/// Mean squared error.
pub fn mse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    let (num, _) = error_sums(predictions, truth)?;
    Ok(num / truth.len() as f64)
}

/// `(Σ(ŷ - y)², Σ y²)`.
pub fn error_sums(predictions: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if predictions.len() != truth.len() {
        return Err(Error::Shape { expected: truth.len(), got: predictions.len() });
    }
    if truth.is_empty() {
        return Err(Error::TooShort("empty prediction vector".into()));
    }
    let num = predictions.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
    let den = truth.iter().map(|y| y * y).sum();
    Ok((num, den))
}

/// Pooled errors of rollouts from several anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledError {
    pub anchors: usize,
    pub points: usize,
    /// Summed squared errors over summed squared truth.
    pub relative_mse: f64,
    pub mse: f64,
}

/// Per-anchor `(Σ(ŷ - y)², Σ y²)` of rollouts scored against the true rows
/// that follow each anchor.
pub fn anchor_error_sums<M: DerivativeModel + ?Sized>(
    model: &M,
    series: &TimeSeries,
    anchors: &[usize],
    config: &RolloutConfig,
) -> Result<Vec<(f64, f64)>> {
    anchors
        .par_iter()
        .map(|&a| {
            let f = rollout(model, series, a, config)?;
            let truth = truth_after(series, a, config.horizon)?;
            error_sums(&f.values, truth)
        })
        .collect()
}

/// Pools per-anchor sums into relative and absolute MSE.
pub fn pool(sums: &[(f64, f64)], horizon: usize) -> Result<PooledError> {
    let num: f64 = sums.iter().map(|s| s.0).sum();
    let den: f64 = sums.iter().map(|s| s.1).sum();
    if sums.is_empty() {
        return Err(Error::TooShort("no evaluation anchors".into()));
    }
    if den == 0.0 {
        return Err(Error::DegenerateMetric);
    }
    let points = sums.len() * horizon;
    Ok(PooledError { anchors: sums.len(), points, relative_mse: num / den, mse: num / points as f64 })
}

pub fn pooled_error<M: DerivativeModel + ?Sized>(
    model: &M,
    series: &TimeSeries,
    anchors: &[usize],
    config: &RolloutConfig,
) -> Result<PooledError> {
    pool(&anchor_error_sums(model, series, anchors, config)?, config.horizon)
}

/// True target rows `anchor+1 ..= anchor+horizon`.
pub fn truth_after(series: &TimeSeries, anchor: usize, horizon: usize) -> Result<&[f64]> {
    series
        .target()
        .get(anchor + 1..anchor + 1 + horizon)
        .ok_or_else(|| Error::Index(format!("no truth for {horizon} steps after row {anchor}")))
}
