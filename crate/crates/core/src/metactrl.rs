//! Meta-controller: predicts the residual error a hybrid configuration will
//! make from the recent history of the series, and picks the configuration
//! with the lowest prediction.
//!
//! # Network
//!
//! The encoder is a single-layer gated recurrent unit run over the trailing
//! window (oldest row first, `h_0 = 0`):
//!
//! ```text
//! z_t = σ(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = σ(W_r x_t + U_r h_{t-1} + b_r)
//! n_t = tanh(W_n x_t + U_n (r_t ⊙ h_{t-1}) + b_n)
//! h_t = (1 - z_t) ⊙ n_t + z_t ⊙ h_{t-1}
//! ```
//!
//! Each input row `x_t` has `k + 2` entries: the target relative to its
//! value at the window end, the covariates, both scaled by training-split
//! statistics, and the sampling gap divided by the mean training gap minus
//! one. The scorer is `w_2 · tanh(W_1 [h_T ; e] + b_1) + b_2`, where `e` is
//! the point's weight vector spread over the plan grid. The scorer output is
//! a standardised (optionally log-transformed) error.
//!
//! Training minimises the mean squared difference between scorer output and
//! standardised realised errors with full-batch gradient descent with
//! momentum and gradient-norm clipping. Gradients come from hand-written
//! backpropagation through time.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::DerivativeModel;
use crate::hybrid::{combine, normalize_weights, HybridPde};
use crate::pblock::{lhs_at, PBlock, TrainConfig};
use crate::series::{resample, ResamplePlan, TimeSeries};

/// Added to realised errors before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// A candidate hybrid configuration: which plans take part and with what
/// weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamPoint {
    pub plans: Vec<usize>,
    pub eps: Vec<f64>,
}

impl HyperparamPoint {
    /// Validates the plan indices and normalises `eps`.
    pub fn new(plans: Vec<usize>, eps: Vec<f64>) -> Result<Self> {
        if plans.is_empty() {
            return Err(Error::Config("a hyperparameter point needs at least one plan".into()));
        }
        let eps = normalize_weights(&eps, plans.len())?;
        Ok(Self { plans, eps })
    }

    pub fn unit(plan: usize) -> Self {
        Self { plans: vec![plan], eps: vec![1.0] }
    }

    pub fn validate(&self, n_plans: usize) -> Result<()> {
        if let Some(p) = self.plans.iter().find(|&&p| p >= n_plans) {
            return Err(Error::Config(format!("plan index {p} outside a grid of {n_plans} plans")));
        }
        let sum: f64 = self.eps.iter().sum();
        if self.plans.len() != self.eps.len() || (sum - 1.0).abs() > 1e-9 || self.eps.iter().any(|e| *e < 0.0) {
            return Err(Error::Weight(format!("invalid weights {:?}", self.eps)));
        }
        Ok(())
    }

    /// Weights spread over all `n_plans` plans.
    pub fn dense(&self, n_plans: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_plans];
        for (p, e) in self.plans.iter().zip(&self.eps) {
            out[*p] += e;
        }
        out
    }

    /// Weighted sum of per-plan outputs.
    pub fn combine(&self, plan_outputs: &[f64]) -> f64 {
        let picked: Vec<f64> = self.plans.iter().map(|&p| plan_outputs[p]).collect();
        combine(&self.eps, &picked)
    }
}

/// Unit vectors, the uniform mixture, and one half/half pair per adjacent
/// plan pair.
pub fn default_grid(n_plans: usize) -> Vec<HyperparamPoint> {
    let mut grid: Vec<HyperparamPoint> = (0..n_plans).map(HyperparamPoint::unit).collect();
    if n_plans > 1 {
        grid.push(HyperparamPoint { plans: (0..n_plans).collect(), eps: vec![1.0 / n_plans as f64; n_plans] });
        for i in 0..n_plans - 1 {
            grid.push(HyperparamPoint { plans: vec![i, i + 1], eps: vec![0.5, 0.5] });
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetTransform {
    Raw,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub hidden: usize,
    pub scorer_hidden: usize,
    /// Trailing rows read by the encoder.
    pub window: usize,
    /// Spacing of training anchors.
    pub anchor_stride: usize,
    /// Rows after each anchor over which realised errors are averaged.
    pub eval_window: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub target: TargetTransform,
    pub seed: u64,
    /// Retrain components at every anchor on the prefix up to it.
    pub retrain_per_anchor: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            scorer_hidden: 32,
            window: 64,
            anchor_stride: 5,
            eval_window: 20,
            steps: 2000,
            learning_rate: 1e-2,
            momentum: 0.9,
            clip: 1.0,
            target: TargetTransform::Log,
            seed: 0,
            retrain_per_anchor: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.scorer_hidden > 0
            && self.window >= 2
            && self.anchor_stride > 0
            && self.eval_window > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid meta settings {self:?}")))
        }
    }
}

/// Anchors visited while walking a training split of `m` rows.
pub fn anchor_positions(m: usize, stride: usize) -> Vec<usize> {
    (0..m).step_by(stride.max(1)).collect()
}

/// Input scaling fixed from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Target first, then covariates.
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub mean_gap: f64,
}

impl Normalizer {
    pub fn fit(series: &TimeSeries) -> Self {
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        };
        let (mut means, mut sds) = (Vec::new(), Vec::new());
        for ch in std::iter::once(series.target()).chain(series.covariates().iter().map(Vec::as_slice)) {
            let (m, s) = stats(ch);
            means.push(m);
            sds.push(s);
        }
        let t = series.times();
        let mean_gap = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        Self { means, sds, mean_gap }
    }

    pub fn n_inputs(&self) -> usize {
        self.means.len() + 1
    }

    /// Encoder inputs for the window ending at `end`, oldest first.
    pub fn features(&self, series: &TimeSeries, end: usize, window: usize) -> Result<Vec<Vec<f64>>> {
        if series.n_covariates() + 1 != self.means.len() {
            return Err(Error::Schema(format!(
                "controller expects {} covariates, series has {}",
                self.means.len() - 1,
                series.n_covariates()
            )));
        }
        if end >= series.len() || end < 1 {
            return Err(Error::Index(format!("encoder window ending at row {end} needs at least two rows")));
        }
        let lo = end + 1 - window.min(end + 1);
        let (t, y) = (series.times(), series.target());
        let y_end = y[end];
        Ok((lo..=end)
            .map(|i| {
                let mut row = Vec::with_capacity(self.n_inputs());
                row.push((y[i] - y_end) / self.sds[0]);
                for (j, x) in series.covariates().iter().enumerate() {
                    row.push((x[i] - self.means[j + 1]) / self.sds[j + 1]);
                }
                let gap = if i > 0 { t[i] - t[i - 1] } else { self.mean_gap };
                row.push(gap / self.mean_gap - 1.0);
                row
            })
            .collect())
    }
}

/// Dimensions of the controller network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input: usize,
    pub hidden: usize,
    pub scorer_hidden: usize,
    pub n_plans: usize,
}

/// Offsets of every parameter block in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Offsets {
    wz: usize,
    wr: usize,
    wn: usize,
    uz: usize,
    ur: usize,
    un: usize,
    bz: usize,
    br: usize,
    bn: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn offsets(&self) -> Offsets {
        let (i, h, s, p) = (self.input, self.hidden, self.scorer_hidden, self.n_plans);
        let wz = 0;
        let wr = wz + h * i;
        let wn = wr + h * i;
        let uz = wn + h * i;
        let ur = uz + h * h;
        let un = ur + h * h;
        let bz = un + h * h;
        let br = bz + h;
        let bn = br + h;
        let w1 = bn + h;
        let b1 = w1 + s * (h + p);
        let w2 = b1 + s;
        let b2 = w2 + s;
        Offsets { wz, wr, wn, uz, ur, un, bz, br, bn, w1, b1, w2, b2, total: b2 + 1 }
    }

    pub fn n_params(&self) -> usize {
        self.offsets().total
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += W v` for row-major `W` of shape `rows × v.len()`.
fn matvec_add(out: &mut [f64], w: &[f64], v: &[f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += Wᵀ u` for row-major `W` of shape `u.len() × out.len()`.
fn matvec_t_add(out: &mut [f64], w: &[f64], u: &[f64]) {
    let cols = out.len();
    for (r, ur) in u.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * ur;
        }
    }
}

/// `G += u vᵀ` for row-major `G` of shape `u.len() × v.len()`.
fn outer_add(g: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (r, ur) in u.iter().enumerate() {
        if *ur == 0.0 {
            continue;
        }
        for (gv, vv) in g[r * cols..(r + 1) * cols].iter_mut().zip(v) {
            *gv += ur * vv;
        }
    }
}

struct Trace {
    /// `h_0 ..= h_T`.
    hs: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
    rs: Vec<Vec<f64>>,
    ns: Vec<Vec<f64>>,
}

/// Network parameters and the forward/backward passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl Network {
    pub fn zeros(layout: Layout) -> Self {
        Self { layout, params: vec![0.0; layout.n_params()] }
    }

    /// Uniform initialisation scaled by the inverse square root of fan-in.
    pub fn random(layout: Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = layout.offsets();
        let mut params = vec![0.0; o.total];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-bound..bound);
            }
        };
        let h = layout.hidden;
        fill(o.wz..o.w1, h);
        fill(o.w1..o.w2, h + layout.n_plans);
        fill(o.w2..o.total, layout.scorer_hidden);
        Self { layout, params }
    }

    fn forward_encoder(&self, feats: &[Vec<f64>]) -> Trace {
        let o = self.layout.offsets();
        let h = self.layout.hidden;
        let p = &self.params;
        let (ih, hh) = (h * self.layout.input, h * h);
        let mut trace = Trace { hs: vec![vec![0.0; h]], zs: Vec::new(), rs: Vec::new(), ns: Vec::new() };
        for x in feats {
            let prev = trace.hs.last().expect("initial state");
            let mut az = p[o.bz..o.bz + h].to_vec();
            let mut ar = p[o.br..o.br + h].to_vec();
            let mut an = p[o.bn..o.bn + h].to_vec();
            matvec_add(&mut az, &p[o.wz..o.wz + ih], x);
            matvec_add(&mut az, &p[o.uz..o.uz + hh], prev);
            matvec_add(&mut ar, &p[o.wr..o.wr + ih], x);
            matvec_add(&mut ar, &p[o.ur..o.ur + hh], prev);
            let z: Vec<f64> = az.iter().map(|v| sigmoid(*v)).collect();
            let r: Vec<f64> = ar.iter().map(|v| sigmoid(*v)).collect();
            let rh: Vec<f64> = r.iter().zip(prev).map(|(a, b)| a * b).collect();
            matvec_add(&mut an, &p[o.wn..o.wn + ih], x);
            matvec_add(&mut an, &p[o.un..o.un + hh], &rh);
            let n: Vec<f64> = an.iter().map(|v| v.tanh()).collect();
            let next: Vec<f64> = (0..h).map(|k| (1.0 - z[k]) * n[k] + z[k] * prev[k]).collect();
            trace.zs.push(z);
            trace.rs.push(r);
            trace.ns.push(n);
            trace.hs.push(next);
        }
        trace
    }

    /// Final encoder state.
    pub fn encode(&self, feats: &[Vec<f64>]) -> Vec<f64> {
        self.forward_encoder(feats).hs.pop().expect("initial state")
    }

    /// Scorer input, hidden activations and output.
    fn score_parts(&self, state: &[f64], dense: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let o = self.layout.offsets();
        let s = self.layout.scorer_hidden;
        let p = &self.params;
        let mut input = state.to_vec();
        input.extend_from_slice(dense);
        let mut u = p[o.b1..o.b1 + s].to_vec();
        matvec_add(&mut u, &p[o.w1..o.b1], &input);
        let a: Vec<f64> = u.iter().map(|v| v.tanh()).collect();
        let out = p[o.b2] + a.iter().zip(&p[o.w2..o.w2 + s]).map(|(x, w)| x * w).sum::<f64>();
        (input, a, out)
    }

    pub fn score(&self, state: &[f64], dense: &[f64]) -> f64 {
        self.score_parts(state, dense).2
    }

    /// Sum of squared errors over the scorer outputs for one window and its
    /// targets, and its gradient (each term weighted by `scale`).
    pub fn loss_and_grad(&self, feats: &[Vec<f64>], dense: &[Vec<f64>], targets: &[f64], scale: f64) -> (f64, Vec<f64>) {
        let o = self.layout.offsets();
        let (h, s) = (self.layout.hidden, self.layout.scorer_hidden);
        let input_dim = self.layout.input;
        let p = &self.params;
        let mut g = vec![0.0; o.total];
        let trace = self.forward_encoder(feats);
        let state = trace.hs.last().expect("initial state");
        let mut dh = vec![0.0; h];
        let mut loss = 0.0;
        for (e, y) in dense.iter().zip(targets) {
            let (input, a, out) = self.score_parts(state, e);
            let diff = out - y;
            loss += scale * diff * diff;
            let dout = 2.0 * scale * diff;
            g[o.b2] += dout;
            let du: Vec<f64> = (0..s).map(|k| dout * p[o.w2 + k] * (1.0 - a[k] * a[k])).collect();
            for k in 0..s {
                g[o.w2 + k] += dout * a[k];
                g[o.b1 + k] += du[k];
            }
            outer_add(&mut g[o.w1..o.b1], &du, &input);
            let mut dinput = vec![0.0; h + self.layout.n_plans];
            matvec_t_add(&mut dinput, &p[o.w1..o.b1], &du);
            for k in 0..h {
                dh[k] += dinput[k];
            }
        }
        let (ih, hh) = (h * input_dim, h * h);
        for t in (0..feats.len()).rev() {
            let x = &feats[t];
            let prev = &trace.hs[t];
            let (z, r, n) = (&trace.zs[t], &trace.rs[t], &trace.ns[t]);
            let daz: Vec<f64> = (0..h).map(|k| dh[k] * (prev[k] - n[k]) * z[k] * (1.0 - z[k])).collect();
            let dan: Vec<f64> = (0..h).map(|k| dh[k] * (1.0 - z[k]) * (1.0 - n[k] * n[k])).collect();
            let rh: Vec<f64> = (0..h).map(|k| r[k] * prev[k]).collect();
            outer_add(&mut g[o.wn..o.wn + ih], &dan, x);
            outer_add(&mut g[o.un..o.un + hh], &dan, &rh);
            for k in 0..h {
                g[o.bn + k] += dan[k];
            }
            let mut drh = vec![0.0; h];
            matvec_t_add(&mut drh, &p[o.un..o.un + hh], &dan);
            let dar: Vec<f64> = (0..h).map(|k| drh[k] * prev[k] * r[k] * (1.0 - r[k])).collect();
            outer_add(&mut g[o.wr..o.wr + ih], &dar, x);
            outer_add(&mut g[o.ur..o.ur + hh], &dar, prev);
            outer_add(&mut g[o.wz..o.wz + ih], &daz, x);
            outer_add(&mut g[o.uz..o.uz + hh], &daz, prev);
            for k in 0..h {
                g[o.br + k] += dar[k];
                g[o.bz + k] += daz[k];
            }
            let mut next = (0..h).map(|k| dh[k] * z[k] + drh[k] * r[k]).collect::<Vec<f64>>();
            matvec_t_add(&mut next, &p[o.uz..o.uz + hh], &daz);
            matvec_t_add(&mut next, &p[o.ur..o.ur + hh], &dar);
            dh = next;
        }
        (loss, g)
    }
}

/// Encoded training example: one anchor with a target per grid point.
#[derive(Debug, Clone)]
pub struct Sample {
    pub anchor: usize,
    pub features: Vec<Vec<f64>>,
    /// Realised errors, untransformed.
    pub errors: Vec<f64>,
}

/// Source of realised errors for grid points at training anchors.
pub trait ErrorOracle: Sync {
    /// Realised error of every grid point at `anchor`, or `None` when the
    /// anchor lacks history or a forward evaluation window.
    fn realized_errors(&self, series: &TimeSeries, anchor: usize, grid: &[HyperparamPoint]) -> Result<Option<Vec<f64>>>;
}

/// Anything that scores grid points from a series' recent history.
pub trait LossPredictor {
    /// Predicted loss of every grid point using history up to the last row.
    fn predict_losses(&self, series: &TimeSeries, grid: &[HyperparamPoint]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaController {
    pub network: Network,
    pub normalizer: Normalizer,
    pub window: usize,
    pub target: TargetTransform,
    pub target_mean: f64,
    pub target_sd: f64,
    pub grid: Vec<HyperparamPoint>,
    pub plans: Vec<ResamplePlan>,
    /// Momentum buffer.
    pub velocity: Vec<f64>,
    pub steps_taken: usize,
    /// Mean squared standardised error after the last step.
    pub train_loss: f64,
}

impl MetaController {
    /// A controller with every parameter zero, raw targets and unit
    /// scaling: it predicts zero for everything.
    pub fn zeros(normalizer: Normalizer, config: &MetaConfig, grid: Vec<HyperparamPoint>, plans: Vec<ResamplePlan>) -> Self {
        let layout = Layout { input: normalizer.n_inputs(), hidden: config.hidden, scorer_hidden: config.scorer_hidden, n_plans: plans.len() };
        let network = Network::zeros(layout);
        let n = layout.n_params();
        Self {
            network,
            normalizer,
            window: config.window,
            target: TargetTransform::Raw,
            target_mean: 0.0,
            target_sd: 1.0,
            grid,
            plans,
            velocity: vec![0.0; n],
            steps_taken: 0,
            train_loss: 0.0,
        }
    }

    fn n_plans(&self) -> usize {
        self.network.layout.n_plans
    }

    fn to_output(&self, standardized: f64) -> f64 {
        let v = self.target_mean + self.target_sd * standardized;
        match self.target {
            TargetTransform::Raw => v,
            TargetTransform::Log => v.exp(),
        }
    }

    /// Predicted losses of `grid` for history ending at row `index`.
    pub fn predict_at(&self, series: &TimeSeries, index: usize, grid: &[HyperparamPoint]) -> Result<Vec<f64>> {
        for p in grid {
            p.validate(self.n_plans())?;
        }
        let feats = self.normalizer.features(series, index, self.window)?;
        let state = self.network.encode(&feats);
        grid.iter()
            .map(|p| {
                let v = self.to_output(self.network.score(&state, &p.dense(self.n_plans())));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::Numeric(format!("non-finite controller output at row {index}")))
                }
            })
            .collect()
    }

    /// Predicted loss of one point for history ending at the last row.
    pub fn predict_loss(&self, series: &TimeSeries, point: &HyperparamPoint) -> Result<f64> {
        Ok(self.predict_at(series, series.last_index(), std::slice::from_ref(point))?[0])
    }

    fn standardize(&self, error: f64) -> f64 {
        let v = match self.target {
            TargetTransform::Raw => error,
            TargetTransform::Log => (error + LOG_FLOOR).ln(),
        };
        (v - self.target_mean) / self.target_sd
    }

    /// Mean squared standardised error over samples, and its gradient.
    pub fn loss_and_grad(&self, samples: &[Sample]) -> (f64, Vec<f64>) {
        let n_plans = self.n_plans();
        let dense: Vec<Vec<f64>> = self.grid.iter().map(|p| p.dense(n_plans)).collect();
        let total: usize = samples.iter().map(|s| s.errors.len()).sum();
        let scale = 1.0 / total.max(1) as f64;
        let parts: Vec<(f64, Vec<f64>)> = samples
            .par_iter()
            .map(|s| {
                let targets: Vec<f64> = s.errors.iter().map(|e| self.standardize(*e)).collect();
                self.network.loss_and_grad(&s.features, &dense, &targets, scale)
            })
            .collect();
        let mut grad = vec![0.0; self.network.params.len()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        (loss, grad)
    }

    /// One clipped momentum step; returns the loss before the step.
    pub fn step(&mut self, samples: &[Sample], config: &MetaConfig) -> Result<f64> {
        let (loss, mut grad) = self.loss_and_grad(samples);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite controller loss at step {}", self.steps_taken)));
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > config.clip {
            let f = config.clip / norm;
            grad.iter_mut().for_each(|g| *g *= f);
        }
        for ((p, v), g) in self.network.params.iter_mut().zip(&mut self.velocity).zip(&grad) {
            *v = config.momentum * *v + g;
            *p -= config.learning_rate * *v;
        }
        self.steps_taken += 1;
        Ok(loss)
    }
}

impl LossPredictor for MetaController {
    fn predict_losses(&self, series: &TimeSeries, grid: &[HyperparamPoint]) -> Result<Vec<f64>> {
        self.predict_at(series, series.last_index(), grid)
    }
}

/// Index of the grid point with the lowest predicted loss; ties go to the
/// lowest index.
pub fn search_hyperparams<P: LossPredictor + ?Sized>(predictor: &P, series: &TimeSeries, grid: &[HyperparamPoint]) -> Result<usize> {
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    let losses = predictor.predict_losses(series, grid)?;
    Ok(argmin(&losses))
}

pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Collects encoded samples at every reachable anchor.
pub fn collect_samples<O: ErrorOracle + ?Sized>(
    series: &TimeSeries,
    grid: &[HyperparamPoint],
    oracle: &O,
    normalizer: &Normalizer,
    config: &MetaConfig,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for anchor in anchor_positions(series.len(), config.anchor_stride) {
        if anchor < 1 {
            continue;
        }
        if let Some(errors) = oracle.realized_errors(series, anchor, grid)? {
            if errors.len() != grid.len() || errors.iter().any(|e| !e.is_finite()) {
                return Err(Error::Numeric(format!("invalid realised errors at anchor {anchor}")));
            }
            let features = normalizer.features(series, anchor, config.window)?;
            samples.push(Sample { anchor, features, errors });
        }
    }
    Ok(samples)
}

/// Walks the training split, records realised errors of every grid point at
/// each anchor, and fits the controller to them.
pub fn train_controller<O: ErrorOracle + ?Sized>(
    series: &TimeSeries,
    grid: &[HyperparamPoint],
    plans: &[ResamplePlan],
    oracle: &O,
    config: &MetaConfig,
) -> Result<MetaController> {
    config.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("empty hyperparameter grid".into()));
    }
    for p in grid {
        p.validate(plans.len())?;
    }
    let normalizer = Normalizer::fit(series);
    let samples = collect_samples(series, grid, oracle, &normalizer, config)?;
    fit_controller(normalizer, &samples, grid, plans, config)
}

/// Fits a freshly initialised controller to pre-collected samples.
pub fn fit_controller(
    normalizer: Normalizer,
    samples: &[Sample],
    grid: &[HyperparamPoint],
    plans: &[ResamplePlan],
    config: &MetaConfig,
) -> Result<MetaController> {
    if samples.is_empty() {
        return Err(Error::TrainingData("no anchor produced a realised error".into()));
    }
    let mut ctrl = MetaController::zeros(normalizer, config, grid.to_vec(), plans.to_vec());
    ctrl.network = Network::random(ctrl.network.layout, config.seed);
    ctrl.target = config.target;
    let transformed: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.errors.iter())
        .map(|e| match config.target {
            TargetTransform::Raw => *e,
            TargetTransform::Log => (e + LOG_FLOOR).ln(),
        })
        .collect();
    let mean = transformed.iter().sum::<f64>() / transformed.len() as f64;
    let sd = (transformed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / transformed.len() as f64).sqrt();
    ctrl.target_mean = mean;
    ctrl.target_sd = if sd > 1e-12 { sd } else { 1.0 };
    let mut loss = f64::NAN;
    for _ in 0..config.steps {
        loss = ctrl.step(samples, config)?;
    }
    ctrl.train_loss = if config.steps > 0 { ctrl.loss_and_grad(samples).0 } else { loss };
    log::debug!("controller fitted on {} anchors, loss {:.4e}", samples.len(), ctrl.train_loss);
    Ok(ctrl)
}

/// Realised errors of hybrid configurations built from P-blocks trained per
/// plan, with trained components cached by `(plan, prefix length)`.
///
/// The prefix a component is trained on is the anchor's row count rounded
/// up to a multiple of `bucket` (capped at the series length). A bucket equal
/// to the training length trains each plan once; a bucket of one retrains at
/// every anchor on exactly the rows seen so far.
pub struct HybridErrorOracle {
    template: PBlock,
    train: TrainConfig,
    plans: Vec<ResamplePlan>,
    eval_window: usize,
    bucket: usize,
    cache: Mutex<BTreeMap<(usize, usize), Arc<PBlock>>>,
}

impl HybridErrorOracle {
    pub fn new(template: PBlock, train: TrainConfig, plans: Vec<ResamplePlan>, eval_window: usize, bucket: usize) -> Self {
        Self { template, train, plans, eval_window, bucket: bucket.max(1), cache: Mutex::new(BTreeMap::new()) }
    }

    /// Bucket for a configuration: one for per-anchor retraining, the full
    /// length otherwise.
    pub fn bucket_for(config: &MetaConfig, train_len: usize) -> usize {
        if config.retrain_per_anchor {
            1
        } else {
            train_len
        }
    }

    pub fn plans(&self) -> &[ResamplePlan] {
        &self.plans
    }

    fn prefix_for(&self, anchor: usize, m: usize) -> usize {
        ((anchor + 1).div_ceil(self.bucket) * self.bucket).min(m)
    }

    /// Component for `plan` trained on the first `prefix` rows. Spans longer
    /// than the prefix are clipped to it.
    pub fn component(&self, series: &TimeSeries, plan: usize, prefix: usize) -> Result<Arc<PBlock>> {
        if let Some(b) = self.cache.lock().expect("cache lock").get(&(plan, prefix)) {
            return Ok(Arc::clone(b));
        }
        let p = self.plans[plan];
        let clipped = ResamplePlan::new(p.span.min(prefix), p.rate);
        let view = resample(&series.prefix(prefix)?, clipped)?;
        let mut block = self.template.clone();
        block.train(&view, &self.train).map_err(|e| e.in_component(plan))?;
        let block = Arc::new(block);
        self.cache.lock().expect("cache lock").insert((plan, prefix), Arc::clone(&block));
        Ok(block)
    }

    /// Trains every plan's component on the first `prefix` rows.
    pub fn components(&self, series: &TimeSeries, prefix: usize) -> Result<Vec<Arc<PBlock>>> {
        (0..self.plans.len()).into_par_iter().map(|p| self.component(series, p, prefix)).collect()
    }

    /// The hybrid model for a grid point from components trained on the
    /// first `prefix` rows.
    pub fn hybrid(&self, series: &TimeSeries, point: &HyperparamPoint, prefix: usize) -> Result<HybridPde<PBlock>> {
        let comps = point
            .plans
            .iter()
            .map(|&p| self.component(series, p, prefix).map(|b| (*b).clone()))
            .collect::<Result<Vec<_>>>()?;
        let plans = point.plans.iter().map(|&p| self.plans[p]).collect();
        HybridPde::new(comps, plans)?.set_weights(&point.eps)
    }
}

impl ErrorOracle for HybridErrorOracle {
    fn realized_errors(&self, series: &TimeSeries, anchor: usize, grid: &[HyperparamPoint]) -> Result<Option<Vec<f64>>> {
        let m = series.len();
        let order = self.template.lhs_order();
        if anchor + self.eval_window > m - 1 {
            return Ok(None);
        }
        let prefix = self.prefix_for(anchor, m);
        let comps = match self.components(series, prefix) {
            Ok(c) => c,
            Err(e) if matches!(e.root(), Error::TooShort(_) | Error::Plan { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let reach = comps
            .iter()
            .zip(&self.plans)
            .map(|(c, p)| (c.min_history() - 1) * p.rate)
            .max()
            .unwrap_or(0)
            .max(order - 1);
        if anchor < reach {
            return Ok(None);
        }
        let mut sums = vec![0.0; grid.len()];
        for j in anchor..anchor + self.eval_window {
            let outputs: Vec<f64> = comps
                .iter()
                .zip(&self.plans)
                .map(|(c, p)| c.evaluate_strided(series, j, p.rate))
                .collect::<Result<_>>()?;
            let lhs = lhs_at(series, j, order);
            for (s, point) in sums.iter_mut().zip(grid) {
                *s += (lhs - point.combine(&outputs)).powi(2);
            }
        }
        Ok(Some(sums.into_iter().map(|s| s / self.eval_window as f64).collect()))
    }
}
