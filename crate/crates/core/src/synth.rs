//! Synthetic data generators: the truncated wave-equation series used for
//! equation recovery, and a regime-switch series used to exercise
//! dynamics-shift adaptation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::TimeSeries;

/// Settings for [`generate_wave`]. Discovery on this data needs a
/// second-order time derivative on the left-hand side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveConfig {
    pub n_points: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub k_max: usize,
    /// Seed for optional Gaussian jitter on `y`; ignored when `noise` is 0.
    pub seed: u64,
    pub noise: f64,
}

impl Default for WaveConfig {
    fn default() -> Self {
        Self { n_points: 1000, t_min: 0.0, t_max: 10.0, k_max: 40, seed: 0, noise: 0.0 }
    }
}

impl WaveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 {
            return Err(Error::Config(format!("n_points must be at least 2, got {}", self.n_points)));
        }
        if !(self.t_min < self.t_max) || !self.t_min.is_finite() || !self.t_max.is_finite() {
            return Err(Error::Config(format!("need t_min < t_max, got [{}, {}]", self.t_min, self.t_max)));
        }
        if self.k_max < 1 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be nonnegative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Coefficient of the `(k, l)` mode; zero unless both are odd.
fn mode_coefficient(k: usize, l: usize) -> f64 {
    let sign = |n: usize| if n % 2 == 0 { 0.0 } else { -2.0 };
    16.0 / (PI * PI) * sign(k) * sign(l) / ((k as f64).powi(3) * (l as f64).powi(3))
}

/// The truncated double series `u(x1, x2, t)` whose second time derivative
/// equals its Laplacian in `(x1, x2)`.
pub fn wave_field(x1: f64, x2: f64, t: f64, k_max: usize) -> f64 {
    let mut total = 0.0;
    for k in (1..=k_max).step_by(2) {
        let sk = (k as f64 * PI * x1).sin();
        for l in (1..=k_max).step_by(2) {
            let freq = PI * ((k * k + l * l) as f64).sqrt();
            total += mode_coefficient(k, l) * sk * (l as f64 * PI * x2).sin() * (freq * t).cos();
        }
    }
    total
}

/// Upper bound on `|wave_field|` for a given truncation.
pub fn wave_bound(k_max: usize) -> f64 {
    let s: f64 = (1..=k_max).step_by(2).map(|k| 2.0 / (k as f64).powi(3)).sum();
    16.0 / (PI * PI) * s * s
}

/// Uniform grid on `[t_min, t_max]` with `x1 = cos²t`, `x2 = sin²t` and
/// `y = u(x1, x2, t)`. Columns are `y, x1, x2`.
pub fn generate_wave(config: &WaveConfig) -> Result<TimeSeries> {
    config.validate()?;
    let n = config.n_points;
    let step = (config.t_max - config.t_min) / (n - 1) as f64;
    let times: Vec<f64> = (0..n).map(|i| config.t_min + i as f64 * step).collect();
    let x1: Vec<f64> = times.iter().map(|t| t.cos().powi(2)).collect();
    let x2: Vec<f64> = times.iter().map(|t| t.sin().powi(2)).collect();
    let mut y: Vec<f64> = times
        .iter()
        .zip(x1.iter().zip(&x2))
        .map(|(&t, (&a, &b))| wave_field(a, b, t, config.k_max))
        .collect();
    add_noise(&mut y, config.noise, config.seed);
    TimeSeries::from_columns(times, y, vec![x1, x2])
}

fn add_noise(values: &mut [f64], sd: f64, seed: u64) {
    if sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sd).expect("finite nonnegative sd");
        for v in values {
            *v += normal.sample(&mut rng);
        }
    }
}

/// Settings for [`generate_regime`].
///
/// The target obeys `dy/dt = a(t)·x1 + b·x2` where `a` flips sign at the
/// midpoint. `x1` and `x2` arrive in alternating bursts of period `period`
/// separated by quiet gaps (`gap` in `(-1, 1)` widens the gaps). `x2` is
/// silent over the `quiet` fraction window so that components fitted on
/// different spans disagree about which terms matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub n_points: usize,
    pub t_max: f64,
    pub period: f64,
    pub gap: f64,
    pub coef_before: f64,
    pub coef_after: f64,
    pub coef_x2: f64,
    /// Fractions of `t_max` bounding the window where `x2` is silent.
    pub quiet: (f64, f64),
    pub noise: f64,
    pub seed: u64,
    /// Integration sub-steps per sampling interval.
    pub substeps: usize,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            n_points: 1000,
            t_max: 50.0,
            period: 6.0,
            gap: 0.6,
            coef_before: 1.0,
            coef_after: -1.0,
            coef_x2: 1.0,
            quiet: (0.5, 0.7),
            noise: 0.01,
            seed: 0,
            substeps: 20,
        }
    }
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 2 || self.substeps == 0 {
            return Err(Error::Config("n_points must be at least 2 and substeps positive".into()));
        }
        if !(self.t_max > 0.0 && self.period > 0.0 && self.gap.abs() < 1.0 && self.noise >= 0.0) {
            return Err(Error::Config("regime parameters out of range".into()));
        }
        Ok(())
    }

    fn envelope(&self, t: f64, phase: f64) -> f64 {
        0.5 * (1.0 + (6.0 * ((2.0 * PI * t / self.period + phase).sin() - self.gap)).tanh())
    }

    /// Covariates `(x1, x2)` at time `t`.
    pub fn covariates(&self, t: f64) -> (f64, f64) {
        let e1 = self.envelope(t, 0.0);
        let e2 = self.envelope(t, PI);
        let frac = t / self.t_max;
        let active = if frac >= self.quiet.0 && frac < self.quiet.1 { 0.0 } else { 1.0 };
        (e1 * (1.0 + (3.0 * t).sin()), 1.5 * active * e2 * (2.1 * t).cos())
    }

    /// Right-hand side `dy/dt` at time `t`.
    pub fn rate(&self, t: f64) -> f64 {
        let a = if t < 0.5 * self.t_max { self.coef_before } else { self.coef_after };
        let (x1, x2) = self.covariates(t);
        a * x1 + self.coef_x2 * x2
    }
}

/// Regime-switch series with columns `y, x1, x2` on a uniform grid over
/// `[0, t_max]`, integrated with fine explicit sub-steps from `y(0) = 0`.
pub fn generate_regime(config: &RegimeConfig) -> Result<TimeSeries> {
    config.validate()?;
    let n = config.n_points;
    let dt = config.t_max / (n - 1) as f64;
    let times: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
    let (x1, x2): (Vec<f64>, Vec<f64>) = times.iter().map(|&t| config.covariates(t)).unzip();
    let mut y = Vec::with_capacity(n);
    let mut state = 0.0;
    y.push(state);
    let h = dt / config.substeps as f64;
    for &t0 in &times[..n - 1] {
        for s in 0..config.substeps {
            state += h * config.rate(t0 + s as f64 * h);
        }
        y.push(state);
    }
    add_noise(&mut y, config.noise, config.seed);
    TimeSeries::from_columns(times, y, vec![x1, x2])
}
