//! Compares a single P-block against two hybrids: one with a fixed
//! configuration, one whose configuration the meta-controller picks per anchor.
//!
//! The series is split chronologically into training, validation and test
//! segments. Components are trained once per plan on the training segment.
//! The fixed hybrid is the grid point with the lowest validation error. The
//! meta-controller is fitted on the training segment only and, at every test
//! anchor, chooses a grid point from the history up to that anchor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{anchor_error_sums, pool, pooled_error, CovariatePolicy, Mode, PooledError, RolloutConfig};
use crate::hybrid::{grid_plans, HybridPde};
use crate::metactrl::{argmin, default_grid, search_hyperparams, train_controller, HybridErrorOracle, HyperparamPoint, MetaConfig, MetaController};
use crate::pblock::{PBlock, TrainConfig};
use crate::series::{split_sizes, ResamplePlan, TimeSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Chronological split fractions, training first.
    pub split: (f64, f64, f64),
    pub horizon: usize,
    /// Spacing of validation and test anchors.
    pub anchor_stride: usize,
    pub mode: Mode,
    pub covariates: CovariatePolicy,
    /// Plan spans as fractions of the training length.
    pub span_fractions: Vec<f64>,
    pub rates: Vec<usize>,
    pub meta: MetaConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            split: (0.7, 0.1, 0.2),
            horizon: 20,
            anchor_stride: 5,
            mode: Mode::Multi,
            covariates: CovariatePolicy::Provided,
            span_fractions: vec![1.0, 0.5, 0.25],
            rates: vec![1, 2],
            meta: MetaConfig::default(),
        }
    }
}

impl AblationConfig {
    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig::new(self.horizon, self.mode).with_covariates(self.covariates)
    }

    /// Anchors starting at `first`, spaced by the stride, whose whole
    /// horizon ends on or before row `last`.
    pub fn anchors(&self, first: usize, last: usize) -> Vec<usize> {
        (first..=last)
            .step_by(self.anchor_stride.max(1))
            .take_while(|&a| a + self.horizon <= last)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub sizes: (usize, usize, usize),
    pub plans: Vec<ResamplePlan>,
    pub grid: Vec<HyperparamPoint>,
    /// Validation relative MSE of every grid point.
    pub validation: Vec<f64>,
    /// Grid index of the fixed hybrid.
    pub fixed_point: usize,
    pub single: PooledError,
    pub fixed_hybrid: PooledError,
    pub meta: PooledError,
    /// Grid index picked at each test anchor.
    pub meta_choices: Vec<usize>,
    pub test_anchors: Vec<usize>,
}

impl AblationReport {
    /// `(name, relative MSE)` rows in display order.
    pub fn rows(&self) -> [(&'static str, f64); 3] {
        [
            ("single", self.single.relative_mse),
            ("hybrid-fixed", self.fixed_hybrid.relative_mse),
            ("hybrid-meta", self.meta.relative_mse),
        ]
    }
}

/// Everything produced by an ablation run.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub report: AblationReport,
    pub components: Vec<PBlock>,
    pub controller: MetaController,
}

fn hybrid_of<'a>(components: &'a [PBlock], plans: &[ResamplePlan], point: &HyperparamPoint) -> Result<HybridPde<&'a PBlock>> {
    let comps = point.plans.iter().map(|&p| &components[p]).collect();
    let pl = point.plans.iter().map(|&p| plans[p]).collect();
    HybridPde::new(comps, pl)?.set_weights(&point.eps)
}

pub fn run_ablation(series: &TimeSeries, template: &PBlock, train: &TrainConfig, config: &AblationConfig) -> Result<AblationRun> {
    let m = series.len();
    let (n_train, n_val, n_test) = split_sizes(m, config.split);
    if n_train < 2 || n_val == 0 || n_test == 0 {
        return Err(Error::TooShort(format!("split of {m} rows leaves an empty segment")));
    }
    let training = series.prefix(n_train)?;
    let plans = grid_plans(n_train, &config.span_fractions, &config.rates);
    if plans.is_empty() {
        return Err(Error::Config("no valid resample plan for the training split".into()));
    }
    let grid = default_grid(plans.len());

    let bucket = HybridErrorOracle::bucket_for(&config.meta, n_train);
    let oracle = HybridErrorOracle::new(template.clone(), train.clone(), plans.clone(), config.meta.eval_window, bucket);
    let components: Vec<PBlock> = oracle.components(&training, n_train)?.iter().map(|b| (**b).clone()).collect();
    let controller = train_controller(&training, &grid, &plans, &oracle, &config.meta)?;

    let rollout = config.rollout();
    let val_anchors = config.anchors(n_train - 1, n_train + n_val - 1);
    let test_anchors = config.anchors(n_train + n_val - 1, m - 1);
    if val_anchors.is_empty() || test_anchors.is_empty() {
        return Err(Error::TooShort(format!("horizon {} does not fit the validation or test segment", config.horizon)));
    }

    let validation = grid
        .iter()
        .map(|p| pooled_error(&hybrid_of(&components, &plans, p)?, series, &val_anchors, &rollout).map(|e| e.relative_mse))
        .collect::<Result<Vec<f64>>>()?;
    let fixed_point = argmin(&validation);

    let single = pooled_error(&hybrid_of(&components, &plans, &grid[0])?, series, &test_anchors, &rollout)?;
    let fixed_hybrid = pooled_error(&hybrid_of(&components, &plans, &grid[fixed_point])?, series, &test_anchors, &rollout)?;

    let mut meta_choices = Vec::with_capacity(test_anchors.len());
    let mut sums = Vec::with_capacity(test_anchors.len());
    for &a in &test_anchors {
        let choice = search_hyperparams(&controller, &series.prefix(a + 1)?, &grid)?;
        let model = hybrid_of(&components, &plans, &grid[choice])?;
        sums.extend(anchor_error_sums(&model, series, &[a], &rollout)?);
        meta_choices.push(choice);
    }
    let meta = pool(&sums, config.horizon)?;

    log::info!(
        "ablation: single {:.4e}, fixed {:.4e} (point {fixed_point}), meta {:.4e}",
        single.relative_mse,
        fixed_hybrid.relative_mse,
        meta.relative_mse
    );
    Ok(AblationRun {
        report: AblationReport {
            sizes: (n_train, n_val, n_test),
            plans,
            grid,
            validation,
            fixed_point,
            single,
            fixed_hybrid,
            meta,
            meta_choices,
            test_anchors,
        },
        components,
        controller,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_ranges() {
        let c = AblationConfig::default();
        let v = c.anchors(699, 799);
        assert_eq!(v.first(), Some(&699));
        assert!(v.iter().all(|a| a + 20 <= 799));
        assert_eq!(v.len(), 17);
        let t = c.anchors(799, 999);
        assert_eq!(t.len(), 37);
        assert!(c.anchors(10, 15).is_empty());
    }
}
