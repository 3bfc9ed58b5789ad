//! Run settings: built-in defaults, then an optional `key = value` file,
//! then command-line flags.

use std::path::Path;
use std::str::FromStr;

use clap::Args;
use serde::{Deserialize, Serialize};

use pdeforecast::experiment::AblationConfig;
use pdeforecast::forecaster::{CovariatePolicy, Mode, RolloutConfig};
use pdeforecast::metactrl::{MetaConfig, TargetTransform};
use pdeforecast::pblock::{StructureConfig, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub target: String,
    /// Explicit term list; a random structure is drawn when empty.
    pub terms: String,
    pub kernel_size: usize,
    pub n_channels: usize,
    pub n_layers: usize,
    pub lhs_order: usize,
    pub lambda: f64,
    pub fista_iters: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub train_kernels: bool,
    pub span_fractions: Vec<f64>,
    pub rates: Vec<usize>,
    pub grid_lambdas: Vec<f64>,
    pub grid_learning_rates: Vec<f64>,
    pub meta_hidden: usize,
    pub meta_window: usize,
    pub meta_anchor_stride: usize,
    pub meta_steps: usize,
    pub meta_learning_rate: f64,
    pub meta_eval_window: usize,
    pub meta_log_target: bool,
    pub retrain_per_anchor: bool,
    pub horizon: usize,
    pub mode: Mode,
    pub covariates: CovariatePolicy,
    pub eval_stride: usize,
    pub seed: u64,
    pub split: (f64, f64, f64),
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let structure = StructureConfig::default();
        let meta = MetaConfig::default();
        Self {
            target: "y".into(),
            terms: String::new(),
            kernel_size: structure.kernel_size,
            n_channels: structure.n_channels,
            n_layers: structure.n_layers,
            lhs_order: structure.lhs_order,
            lambda: train.lambda,
            fista_iters: train.fista_iters,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            train_kernels: train.train_kernels,
            span_fractions: vec![1.0, 0.5, 0.25],
            rates: vec![1, 2],
            grid_lambdas: vec![1e-4, 1e-3, 1e-2],
            grid_learning_rates: vec![1e-2, 3e-3, 1e-3],
            meta_hidden: meta.hidden,
            meta_window: meta.window,
            meta_anchor_stride: meta.anchor_stride,
            meta_steps: meta.steps,
            meta_learning_rate: meta.learning_rate,
            meta_eval_window: meta.eval_window,
            meta_log_target: meta.target == TargetTransform::Log,
            retrain_per_anchor: meta.retrain_per_anchor,
            horizon: 20,
            mode: Mode::Multi,
            covariates: CovariatePolicy::Provided,
            eval_stride: 5,
            seed: 0,
            split: (0.7, 0.1, 0.2),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.trim().parse().map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

pub fn parse_mode(value: &str) -> Result<Mode, CliError> {
    match value.trim() {
        "single" => Ok(Mode::Single),
        "multi" => Ok(Mode::Multi),
        other => Err(CliError::Config(format!("mode must be `single` or `multi`, got `{other}`"))),
    }
}

pub fn parse_policy(value: &str) -> Result<CovariatePolicy, CliError> {
    match value.trim() {
        "hold-last" => Ok(CovariatePolicy::HoldLast),
        "provided" => Ok(CovariatePolicy::Provided),
        other => Err(CliError::Config(format!("covariates must be `hold-last` or `provided`, got `{other}`"))),
    }
}

fn parse_split(key: &str, value: &str) -> Result<(f64, f64, f64), CliError> {
    match parse_list::<f64>(key, value)?.as_slice() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(CliError::Config(format!("`{key}` needs three comma-separated fractions"))),
    }
}

impl RunConfig {
    /// Sets one field from its kebab-case key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "target" => self.target = value.trim().to_string(),
            "terms" => self.terms = value.trim().to_string(),
            "kernel-size" => self.kernel_size = parse(key, value)?,
            "n-channels" => self.n_channels = parse(key, value)?,
            "n-layers" => self.n_layers = parse(key, value)?,
            "lhs-order" => self.lhs_order = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "fista-iters" => self.fista_iters = parse(key, value)?,
            "learning-rate" => self.learning_rate = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "train-kernels" => self.train_kernels = parse_bool(key, value)?,
            "span-fractions" => self.span_fractions = parse_list(key, value)?,
            "rates" => self.rates = parse_list(key, value)?,
            "grid-lambdas" => self.grid_lambdas = parse_list(key, value)?,
            "grid-learning-rates" => self.grid_learning_rates = parse_list(key, value)?,
            "meta-hidden" => self.meta_hidden = parse(key, value)?,
            "meta-window" => self.meta_window = parse(key, value)?,
            "meta-anchor-stride" => self.meta_anchor_stride = parse(key, value)?,
            "meta-steps" => self.meta_steps = parse(key, value)?,
            "meta-learning-rate" => self.meta_learning_rate = parse(key, value)?,
            "meta-eval-window" => self.meta_eval_window = parse(key, value)?,
            "meta-log-target" => self.meta_log_target = parse_bool(key, value)?,
            "retrain-per-anchor" => self.retrain_per_anchor = parse_bool(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "mode" => self.mode = parse_mode(value)?,
            "covariates" => self.covariates = parse_policy(value)?,
            "eval-stride" => self.eval_stride = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "split" => self.split = parse_split(key, value)?,
            other => return Err(CliError::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; blank lines and `#` comments are
    /// skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("kernel-size", self.kernel_size),
            ("n-channels", self.n_channels),
            ("n-layers", self.n_layers),
            ("lhs-order", self.lhs_order),
            ("fista-iters", self.fista_iters),
            ("meta-hidden", self.meta_hidden),
            ("meta-window", self.meta_window),
            ("meta-anchor-stride", self.meta_anchor_stride),
            ("meta-eval-window", self.meta_eval_window),
            ("horizon", self.horizon),
            ("eval-stride", self.eval_stride),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("`{k}` must be positive")));
        }
        if self.span_fractions.is_empty() || self.rates.is_empty() {
            return Err(CliError::Config("plan grid must be non-empty".into()));
        }
        if self.grid_lambdas.is_empty() || self.grid_learning_rates.is_empty() {
            return Err(CliError::Config("search grids must be non-empty".into()));
        }
        let (a, b, c) = self.split;
        if [a, b, c].iter().any(|v| !(*v >= 0.0)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!("split {:?} must be nonnegative and sum to 1", self.split)));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            fista_iters: self.fista_iters,
            train_kernels: self.train_kernels,
            ..TrainConfig::default()
        }
    }

    pub fn structure_config(&self) -> StructureConfig {
        StructureConfig {
            n_channels: self.n_channels,
            n_layers: self.n_layers,
            kernel_size: self.kernel_size,
            lhs_order: self.lhs_order,
            seed: self.seed,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            hidden: self.meta_hidden,
            window: self.meta_window,
            anchor_stride: self.meta_anchor_stride,
            eval_window: self.meta_eval_window,
            steps: self.meta_steps,
            learning_rate: self.meta_learning_rate,
            target: if self.meta_log_target { TargetTransform::Log } else { TargetTransform::Raw },
            seed: self.seed,
            retrain_per_anchor: self.retrain_per_anchor,
            ..MetaConfig::default()
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig::new(self.horizon, self.mode).with_covariates(self.covariates)
    }

    pub fn ablation_config(&self) -> AblationConfig {
        AblationConfig {
            split: self.split,
            horizon: self.horizon,
            anchor_stride: self.eval_stride,
            mode: self.mode,
            covariates: self.covariates,
            span_fractions: self.span_fractions.clone(),
            rates: self.rates.clone(),
            meta: self.meta_config(),
        }
    }
}

/// Flags mirroring [`RunConfig`] fields; any flag given overrides the
/// config file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// `key = value` settings file applied before flags.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Seed for every random draw.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Target column name.
    #[arg(long)]
    pub target: Option<String>,
    /// Explicit term list, e.g. `D2(y,x1);x2*t`.
    #[arg(long)]
    pub terms: Option<String>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub n_channels: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub lhs_order: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub fista_iters: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub train_kernels: Option<bool>,
    /// Comma-separated span fractions of the training length.
    #[arg(long)]
    pub span_fractions: Option<String>,
    /// Comma-separated sampling rates.
    #[arg(long)]
    pub rates: Option<String>,
    #[arg(long)]
    pub grid_lambdas: Option<String>,
    #[arg(long)]
    pub grid_learning_rates: Option<String>,
    #[arg(long)]
    pub meta_hidden: Option<usize>,
    #[arg(long)]
    pub meta_window: Option<usize>,
    #[arg(long)]
    pub meta_anchor_stride: Option<usize>,
    #[arg(long)]
    pub meta_steps: Option<usize>,
    #[arg(long)]
    pub meta_learning_rate: Option<f64>,
    #[arg(long)]
    pub meta_eval_window: Option<usize>,
    #[arg(long)]
    pub meta_log_target: Option<bool>,
    /// Retrain components at every controller anchor.
    #[arg(long)]
    pub retrain_per_anchor: Option<bool>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// `single` or `multi`.
    #[arg(long)]
    pub mode: Option<String>,
    /// `hold-last` or `provided`.
    #[arg(long)]
    pub covariates: Option<String>,
    #[arg(long)]
    pub eval_stride: Option<usize>,
    /// Train, validation, test fractions, e.g. `0.7,0.1,0.2`.
    #[arg(long)]
    pub split: Option<String>,
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let d = |v: &Option<String>| v.clone();
        let pairs: Vec<(&str, Option<String>)> = vec![
            ("seed", self.seed.map(|v| v.to_string())),
            ("target", d(&self.target)),
            ("terms", d(&self.terms)),
            ("kernel-size", self.kernel_size.map(|v| v.to_string())),
            ("n-channels", self.n_channels.map(|v| v.to_string())),
            ("n-layers", self.n_layers.map(|v| v.to_string())),
            ("lhs-order", self.lhs_order.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| format!("{v:?}"))),
            ("fista-iters", self.fista_iters.map(|v| v.to_string())),
            ("learning-rate", self.learning_rate.map(|v| format!("{v:?}"))),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("train-kernels", self.train_kernels.map(|v| v.to_string())),
            ("span-fractions", d(&self.span_fractions)),
            ("rates", d(&self.rates)),
            ("grid-lambdas", d(&self.grid_lambdas)),
            ("grid-learning-rates", d(&self.grid_learning_rates)),
            ("meta-hidden", self.meta_hidden.map(|v| v.to_string())),
            ("meta-window", self.meta_window.map(|v| v.to_string())),
            ("meta-anchor-stride", self.meta_anchor_stride.map(|v| v.to_string())),
            ("meta-steps", self.meta_steps.map(|v| v.to_string())),
            ("meta-learning-rate", self.meta_learning_rate.map(|v| format!("{v:?}"))),
            ("meta-eval-window", self.meta_eval_window.map(|v| v.to_string())),
            ("meta-log-target", self.meta_log_target.map(|v| v.to_string())),
            ("retrain-per-anchor", self.retrain_per_anchor.map(|v| v.to_string())),
            ("horizon", self.horizon.map(|v| v.to_string())),
            ("mode", d(&self.mode)),
            ("covariates", d(&self.covariates)),
            ("eval-stride", self.eval_stride.map(|v| v.to_string())),
            ("split", d(&self.split)),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
