//! Weighted ensembles of derivative models, each reading the series through
//! its own resample plan.
//!
//! Component `i` is trained on `resample(series, plans[i])` and, at
//! evaluation time, reads the strided view ending at the requested index
//! with stride `plans[i].rate`. The ensemble output is
//! `H = Σ_i ε_i · F_i` with `ε` on the probability simplex.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::DerivativeModel;
use crate::pblock::{FitReport, PBlock, TrainConfig};
use crate::series::{resample, ResamplePlan, TimeSeries};

/// Tolerance on `Σ ε = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridPde<M = PBlock> {
    components: Vec<M>,
    plans: Vec<ResamplePlan>,
    weights: Vec<f64>,
}

impl<M> HybridPde<M> {
    /// Assembles components with uniform weights.
    pub fn new(components: Vec<M>, plans: Vec<ResamplePlan>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Config("a hybrid model needs at least one component".into()));
        }
        if components.len() != plans.len() {
            return Err(Error::Shape { expected: components.len(), got: plans.len() });
        }
        let h = components.len();
        Ok(Self { components, plans, weights: vec![1.0 / h as f64; h] })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[M] {
        &self.components
    }

    pub fn plans(&self) -> &[ResamplePlan] {
        &self.plans
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Replaces `ε` with `eps / Σ eps`.
    pub fn set_weights(mut self, eps: &[f64]) -> Result<Self> {
        self.weights = normalize_weights(eps, self.components.len())?;
        Ok(self)
    }

    /// Index of the largest weight; ties go to the lowest index.
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (i, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = i;
            }
        }
        best
    }
}

/// Validates and renormalises a weight vector of length `h`.
pub fn normalize_weights(eps: &[f64], h: usize) -> Result<Vec<f64>> {
    if eps.len() != h {
        return Err(Error::Shape { expected: h, got: eps.len() });
    }
    if eps.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
        return Err(Error::Weight(format!("weights must be finite and nonnegative: {eps:?}")));
    }
    let total: f64 = eps.iter().sum();
    if total <= 0.0 {
        return Err(Error::Weight("all weights are zero".into()));
    }
    Ok(eps.iter().map(|e| e / total).collect())
}

impl<M: DerivativeModel> HybridPde<M> {
    /// Each component's output at `index` on its own strided view.
    pub fn component_outputs(&self, series: &TimeSeries, index: usize) -> Result<Vec<f64>> {
        self.components
            .iter()
            .zip(&self.plans)
            .enumerate()
            .map(|(i, (c, p))| c.evaluate_strided(series, index, p.rate).map_err(|e| e.in_component(i)))
            .collect()
    }

    /// `H = Σ_i ε_i · F_i` at `index`.
    pub fn evaluate_hybrid(&self, series: &TimeSeries, index: usize) -> Result<f64> {
        Ok(combine(&self.weights, &self.component_outputs(series, index)?))
    }
}

/// `Σ ε_i F_i`, accumulated from the first component so a single unit
/// weight returns its component's value unchanged.
pub fn combine(weights: &[f64], outputs: &[f64]) -> f64 {
    let mut acc = weights[0] * outputs[0];
    for (w, f) in weights.iter().zip(outputs).skip(1) {
        acc += w * f;
    }
    acc
}

impl<M: DerivativeModel> DerivativeModel for HybridPde<M> {
    fn lhs_order(&self) -> usize {
        self.components[0].lhs_order()
    }

    fn min_history(&self) -> usize {
        self.components
            .iter()
            .zip(&self.plans)
            .map(|(c, p)| (c.min_history() - 1) * p.rate + 1)
            .max()
            .unwrap_or(1)
    }

    fn evaluate(&self, series: &TimeSeries, index: usize) -> Result<f64> {
        self.evaluate_hybrid(series, index)
    }
}

/// Trains one copy of `template` per plan on the correspondingly resampled
/// series, in parallel. Weights start uniform.
pub fn train_hybrid(
    series: &TimeSeries,
    plans: &[ResamplePlan],
    template: &PBlock,
    config: &TrainConfig,
) -> Result<(HybridPde<PBlock>, Vec<FitReport>)> {
    if plans.is_empty() {
        return Err(Error::Config("no resample plans".into()));
    }
    let trained: Vec<(PBlock, FitReport)> = plans
        .par_iter()
        .enumerate()
        .map(|(i, plan)| train_component(series, *plan, template, config).map_err(|e| e.in_component(i)))
        .collect::<Result<_>>()?;
    let (blocks, reports): (Vec<_>, Vec<_>) = trained.into_iter().unzip();
    Ok((HybridPde::new(blocks, plans.to_vec())?, reports))
}

/// Trains a copy of `template` on `resample(series, plan)`.
pub fn train_component(series: &TimeSeries, plan: ResamplePlan, template: &PBlock, config: &TrainConfig) -> Result<(PBlock, FitReport)> {
    let view = resample(series, plan)?;
    let mut block = template.clone();
    let report = block.train(&view, config)?;
    Ok((block, report))
}

/// Spans `{m, m/2, m/4}` crossed with rates `{1, 2}`, dropping plans that
/// leave fewer than two points.
pub fn default_plans(m: usize) -> Vec<ResamplePlan> {
    grid_plans(m, &[1.0, 0.5, 0.25], &[1, 2])
}

/// Plans from span fractions of `m` and rates, in row-major order.
pub fn grid_plans(m: usize, span_fractions: &[f64], rates: &[usize]) -> Vec<ResamplePlan> {
    span_fractions
        .iter()
        .flat_map(|f| {
            let span = ((m as f64) * f).round() as usize;
            rates.iter().map(move |&r| ResamplePlan::new(span.min(m), r))
        })
        .filter(|p| p.validate(m).is_ok())
        .collect()
}
