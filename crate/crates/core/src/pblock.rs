//! The P-block: a sparse linear combination of candidate monomials built from
//! learned derivative ratios and raw channel values, optionally gated by time.
//!
//! Each term is a product of factors. A derivative-ratio factor convolves a
//! learned kernel with a numerator channel and divides by the same kernel
//! convolved with a covariate (or by the sampling spacing raised to the
//! kernel's order when the denominator is time). Raw factors read the channel
//! at the evaluation index. A term whose time gate is open is further
//! multiplied by the timestamp. The block output is
//! `F = Σ_c f_c · term_c + bias`.
//!
//! Windows are causal: a block with kernel size `N` evaluated at index `i`
//! reads rows `i-N+1 ..= i` (or, for a strided view with rate `r`, rows
//! `i-(N-1)r, .., i-r, i`).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffop::{constrain_kernel, dot, ConvKernel};
use crate::error::{Error, Result};
use crate::series::{second_diff_at, Channel, TimeSeries};
use crate::sparsereg::{fista, LassoProblem};

/// Denominators smaller than this in magnitude zero the term at that sample.
pub const DENOMINATOR_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Denominator {
    Covariate(usize),
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    /// `(K ⊛ num) / (K ⊛ den)`, with `K` constrained to derivative `order`.
    Ratio { num: Channel, den: Denominator, order: usize },
    /// The channel value at the evaluation index.
    Raw(Channel),
}

/// A candidate monomial: factors in canonical order plus the time gate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TermSpec {
    factors: Vec<Factor>,
    time: bool,
}

impl TermSpec {
    pub fn new(mut factors: Vec<Factor>, time: bool) -> Result<Self> {
        if factors.is_empty() && !time {
            return Err(Error::Config("a term needs at least one factor; the constant is the bias".into()));
        }
        for f in &factors {
            if let Factor::Ratio { num, den, order } = f {
                if *order == 0 {
                    return Err(Error::Config("derivative ratios need order of at least 1".into()));
                }
                if let (Channel::Covariate(a), Denominator::Covariate(b)) = (num, den) {
                    if a == b {
                        return Err(Error::Config(format!("ratio of x{} to itself", a + 1)));
                    }
                }
            }
        }
        factors.sort();
        Ok(Self { factors, time })
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Whether the time gate is open for this term.
    pub fn time(&self) -> bool {
        self.time
    }

    /// Same term with the gate set to `time`.
    pub fn with_time(&self, time: bool) -> Self {
        Self { factors: self.factors.clone(), time }
    }

    pub fn ratio_count(&self) -> usize {
        self.factors.iter().filter(|f| matches!(f, Factor::Ratio { .. })).count()
    }

    fn check_against(&self, n_covariates: usize, kernel_size: usize) -> Result<()> {
        let check_channel = |c: &Channel| match c {
            Channel::Covariate(j) if *j >= n_covariates => {
                Err(Error::Config(format!("term {self} uses x{} but the series has {n_covariates} covariates", j + 1)))
            }
            _ => Ok(()),
        };
        for f in &self.factors {
            match f {
                Factor::Raw(c) => check_channel(c)?,
                Factor::Ratio { num, den, order } => {
                    check_channel(num)?;
                    if let Denominator::Covariate(j) = den {
                        check_channel(&Channel::Covariate(*j))?;
                    }
                    if *order >= kernel_size {
                        return Err(Error::UnsupportedOrder(*order));
                    }
                }
            }
        }
        Ok(())
    }
}

fn channel_token(c: Channel) -> String {
    match c {
        Channel::Target => "y".into(),
        Channel::Covariate(j) => format!("x{}", j + 1),
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Raw(c) => write!(f, "{}", channel_token(*c)),
            Factor::Ratio { num, den, order } => {
                let den = match den {
                    Denominator::Covariate(j) => format!("x{}", j + 1),
                    Denominator::Time => "t".into(),
                };
                write!(f, "D{order}({},{den})", channel_token(*num))
            }
        }
    }
}

/// Canonical text form, e.g. `D2(y,x1)*x2*t`.
impl fmt::Display for TermSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = self.factors.iter().map(ToString::to_string).collect();
        if self.time {
            parts.push("t".into());
        }
        write!(f, "{}", parts.join("*"))
    }
}

fn parse_channel(tok: &str) -> Result<Channel> {
    match tok {
        "y" => Ok(Channel::Target),
        _ => {
            let j: usize = tok
                .strip_prefix('x')
                .and_then(|n| n.parse().ok())
                .filter(|&j| j >= 1)
                .ok_or_else(|| Error::Config(format!("unknown variable `{tok}`")))?;
            Ok(Channel::Covariate(j - 1))
        }
    }
}

impl FromStr for TermSpec {
    type Err = Error;

    /// Grammar: factors joined by `*`; a factor is `y`, `x<j>` (1-based),
    /// `t` (time gate) or `D<order>(<num>,<den>)` with `<den>` a covariate
    /// or `t`.
    fn from_str(s: &str) -> Result<Self> {
        let mut factors = Vec::new();
        let mut time = false;
        for raw in s.split('*') {
            let tok: String = raw.chars().filter(|c| !c.is_whitespace()).collect();
            if tok == "t" {
                if time {
                    return Err(Error::Config(format!("time factor repeated in `{s}`")));
                }
                time = true;
            } else if let Some(rest) = tok.strip_prefix('D') {
                let bad = || Error::Config(format!("malformed derivative factor `{tok}`"));
                let open = rest.find('(').ok_or_else(bad)?;
                let order: usize = rest[..open].parse().map_err(|_| bad())?;
                let inner = rest[open + 1..].strip_suffix(')').ok_or_else(bad)?;
                let (num, den) = inner.split_once(',').ok_or_else(bad)?;
                let num = parse_channel(num)?;
                let den = match den {
                    "t" => Denominator::Time,
                    other => match parse_channel(other)? {
                        Channel::Covariate(j) => Denominator::Covariate(j),
                        Channel::Target => return Err(Error::Config(format!("`y` cannot be a denominator in `{tok}`"))),
                    },
                };
                factors.push(Factor::Ratio { num, den, order });
            } else {
                factors.push(Factor::Raw(parse_channel(&tok)?));
            }
        }
        TermSpec::new(factors, time)
    }
}

/// Parses a `;`-separated term list.
pub fn parse_terms(s: &str) -> Result<Vec<TermSpec>> {
    s.split(';').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
}

/// One candidate term together with a kernel for each ratio factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub spec: TermSpec,
    pub kernels: Vec<ConvKernel>,
}

/// Settings for a seeded random term structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureConfig {
    pub n_channels: usize,
    pub n_layers: usize,
    pub kernel_size: usize,
    pub lhs_order: usize,
    pub seed: u64,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self { n_channels: 6, n_layers: 2, kernel_size: 5, lhs_order: 1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub fista_iters: usize,
    pub fista_tol: f64,
    /// Step for central finite-difference kernel gradients.
    pub fd_step: f64,
    /// Kernel updates are skipped when false (weights only).
    pub train_kernels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            epochs: 10,
            learning_rate: 1e-2,
            fista_iters: crate::sparsereg::DEFAULT_MAX_ITERS,
            fista_tol: crate::sparsereg::DEFAULT_TOL,
            fd_step: 1e-5,
            train_kernels: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.learning_rate > 0.0
            && self.fista_iters > 0
            && self.fista_tol >= 0.0
            && self.fd_step > 0.0
            && [self.lambda, self.learning_rate, self.fd_step].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings {self:?}")))
        }
    }
}

/// Regression data assembled from a series.
#[derive(Debug, Clone)]
pub struct CandidateMatrix {
    /// Series row behind each matrix row.
    pub indices: Vec<usize>,
    /// `rows × (terms + 1)`, last column all ones.
    pub data: DMatrix<f64>,
    /// Left-hand side time derivative per row.
    pub lhs: Vec<f64>,
    /// Rows where at least one term hit the denominator guard.
    pub flagged: Vec<bool>,
}

impl CandidateMatrix {
    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub rows: usize,
    pub flagged_rows: usize,
    /// Residual sum of squares over the centred LHS sum of squares, before
    /// any kernel update.
    pub initial_residual: f64,
    pub final_residual: f64,
    /// Mean squared residual in LHS units.
    pub mse: f64,
    pub nonzero_terms: usize,
    pub epochs: usize,
    /// Mean `|f_c · term_c|` over training rows, per term.
    pub contributions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PBlock {
    kernel_size: usize,
    lhs_order: usize,
    n_covariates: usize,
    terms: Vec<Term>,
    weights: Vec<f64>,
    bias: f64,
    trained: bool,
}

impl PBlock {
    /// A block over an explicit term list. Kernels start at the
    /// minimum-norm stencil of each factor's order; weights start at zero.
    pub fn with_terms(specs: Vec<TermSpec>, n_covariates: usize, kernel_size: usize, lhs_order: usize) -> Result<Self> {
        if !(1..=2).contains(&lhs_order) {
            return Err(Error::UnsupportedOrder(lhs_order));
        }
        ConvKernel::zeros(kernel_size)?;
        let mut terms = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.check_against(n_covariates, kernel_size)?;
            let kernels = spec
                .factors()
                .iter()
                .filter_map(|f| match f {
                    Factor::Ratio { order, .. } => Some(ConvKernel::for_order(kernel_size, *order)),
                    Factor::Raw(_) => None,
                })
                .collect::<Result<Vec<_>>>()?;
            terms.push(Term { spec, kernels });
        }
        let n = terms.len();
        Ok(Self { kernel_size, lhs_order, n_covariates, terms, weights: vec![0.0; n], bias: 0.0, trained: false })
    }

    /// A block whose term structure and time gates are drawn from the seed.
    pub fn random(config: &StructureConfig, n_covariates: usize) -> Result<Self> {
        if config.n_channels == 0 || config.n_layers == 0 {
            return Err(Error::Config("n_channels and n_layers must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let max_order = (config.kernel_size.saturating_sub(1)).clamp(1, 2);
        let mut specs: Vec<TermSpec> = Vec::new();
        let mut attempts = 0;
        while specs.len() < config.n_channels && attempts < 100 * config.n_channels {
            attempts += 1;
            let layers = rng.random_range(1..=config.n_layers);
            let factors: Vec<Factor> = (0..layers).map(|_| random_factor(&mut rng, n_covariates, max_order)).collect();
            let time = rng.random_bool(0.5);
            if let Ok(spec) = TermSpec::new(factors, time) {
                if !specs.contains(&spec) {
                    specs.push(spec);
                }
            }
        }
        Self::with_terms(specs, n_covariates, config.kernel_size, config.lhs_order)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn lhs_order(&self) -> usize {
        self.lhs_order
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Replaces output weights and bias and marks the block trained.
    pub fn set_output(&mut self, weights: Vec<f64>, bias: f64) -> Result<()> {
        if weights.len() != self.terms.len() {
            return Err(Error::Shape { expected: self.terms.len(), got: weights.len() });
        }
        if !(bias.is_finite() && weights.iter().all(|w| w.is_finite())) {
            return Err(Error::Numeric("non-finite output weight".into()));
        }
        self.weights = weights;
        self.bias = bias;
        self.trained = true;
        Ok(())
    }

    /// Replaces the kernel for ratio factor `slot` of term `term`.
    pub fn set_kernel(&mut self, term: usize, slot: usize, kernel: ConvKernel) -> Result<()> {
        if kernel.len() != self.kernel_size {
            return Err(Error::Shape { expected: self.kernel_size, got: kernel.len() });
        }
        let t = self.terms.get_mut(term).ok_or_else(|| Error::Index(format!("term {term}")))?;
        let k = t.kernels.get_mut(slot).ok_or_else(|| Error::Index(format!("kernel {slot} of term {term}")))?;
        *k = kernel;
        Ok(())
    }

    /// Trailing rows needed at an evaluation index.
    pub fn window(&self) -> usize {
        self.kernel_size
    }

    fn check_index(&self, series: &TimeSeries, index: usize, rate: usize) -> Result<()> {
        if series.n_covariates() != self.n_covariates {
            return Err(Error::Schema(format!(
                "block expects {} covariates, series has {}",
                self.n_covariates,
                series.n_covariates()
            )));
        }
        let reach = (self.kernel_size - 1) * rate;
        if index >= series.len() || index < reach || rate == 0 {
            return Err(Error::Index(format!(
                "index {index} does not admit a {}-point window at stride {rate} in a series of {} rows",
                self.kernel_size,
                series.len()
            )));
        }
        Ok(())
    }

    /// Value of one term at `end` with stride `rate`; the flag reports a
    /// guarded denominator.
    fn term_value(&self, term: &Term, series: &TimeSeries, end: usize, rate: usize) -> (f64, bool) {
        let n = self.kernel_size;
        let row = |p: usize| end - (n - 1 - p) * rate;
        let conv = |k: &ConvKernel, values: &[f64]| -> f64 {
            k.weights().iter().enumerate().map(|(p, q)| q * values[row(p)]).sum()
        };
        let mut value = 1.0;
        let mut kernels = term.kernels.iter();
        for factor in term.spec.factors() {
            match factor {
                Factor::Raw(c) => value *= series.channel(*c)[end],
                Factor::Ratio { num, den, order } => {
                    let k = kernels.next().expect("one kernel per ratio factor");
                    let top = conv(k, series.channel(*num));
                    let bottom = match den {
                        Denominator::Covariate(j) => {
                            let b = conv(k, series.covariate(*j));
                            if b.abs() < DENOMINATOR_GUARD {
                                return (0.0, true);
                            }
                            b
                        }
                        Denominator::Time => {
                            let t = series.times();
                            ((t[end] - t[row(0)]) / (n - 1) as f64).powi(*order as i32)
                        }
                    };
                    value *= top / bottom;
                }
            }
        }
        if term.spec.time() {
            value *= series.times()[end];
        }
        (value, false)
    }

    /// Term values at `end` (stride `rate`) followed by the constant 1.
    fn row_into(&self, series: &TimeSeries, end: usize, rate: usize, out: &mut Vec<f64>) -> bool {
        out.clear();
        let mut flagged = false;
        for term in &self.terms {
            let (v, f) = self.term_value(term, series, end, rate);
            flagged |= f;
            out.push(v);
        }
        out.push(1.0);
        flagged
    }

    /// Output weights followed by the bias, matching a candidate row.
    fn coefficients(&self) -> Vec<f64> {
        let mut w = self.weights.clone();
        w.push(self.bias);
        w
    }

    /// `F` at `index`, reading rows `index-N+1 ..= index`.
    pub fn evaluate(&self, series: &TimeSeries, index: usize) -> Result<f64> {
        self.evaluate_strided(series, index, 1)
    }

    /// `F` on the strided view ending at `index` with stride `rate`.
    pub fn evaluate_strided(&self, series: &TimeSeries, index: usize, rate: usize) -> Result<f64> {
        Ok(self.evaluate_flagged(series, index, rate)?.0)
    }

    /// `F` plus whether any term hit the denominator guard.
    pub fn evaluate_flagged(&self, series: &TimeSeries, index: usize, rate: usize) -> Result<(f64, bool)> {
        self.check_index(series, index, rate)?;
        let mut row = Vec::with_capacity(self.terms.len() + 1);
        let flagged = self.row_into(series, index, rate, &mut row);
        Ok((dot(&row, &self.coefficients()), flagged))
    }

    /// Rows `N-1 ..= m-2`: full causal windows and a defined LHS.
    pub fn candidate_matrix(&self, series: &TimeSeries) -> Result<CandidateMatrix> {
        let m = series.len();
        let first = self.kernel_size - 1;
        if m < first + 2 {
            return Err(Error::TooShort(format!(
                "{m} rows leave no sample with a {}-point window and a derivative",
                self.kernel_size
            )));
        }
        self.check_index(series, first, 1)?;
        let indices: Vec<usize> = (first..=m - 2).collect();
        let cols = self.terms.len() + 1;
        let mut data = DMatrix::zeros(indices.len(), cols);
        let mut flagged = Vec::with_capacity(indices.len());
        let mut row = Vec::with_capacity(cols);
        for (r, &i) in indices.iter().enumerate() {
            flagged.push(self.row_into(series, i, 1, &mut row));
            for (c, v) in row.iter().enumerate() {
                data[(r, c)] = *v;
            }
        }
        let lhs = indices.iter().map(|&i| lhs_at(series, i, self.lhs_order)).collect();
        Ok(CandidateMatrix { indices, data, lhs, flagged })
    }

    /// Column `term` of the candidate matrix for the given rows.
    fn column(&self, term: &Term, series: &TimeSeries, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.term_value(term, series, i, 1).0).collect()
    }

    /// Alternating optimisation of output weights (FISTA on standardised
    /// columns) and kernel taps (finite-difference gradient descent followed
    /// by moment projection).
    pub fn train(&mut self, series: &TimeSeries, config: &TrainConfig) -> Result<FitReport> {
        config.validate()?;
        let mut cm = self.candidate_matrix(series)?;
        self.solve_output(&cm, config)?;
        let initial = relative_residual(&cm, &self.coefficients());
        let mut best = (self.clone(), initial);
        let mut epochs = 0;
        if config.train_kernels && self.terms.iter().any(|t| !t.kernels.is_empty()) {
            for _ in 0..config.epochs {
                epochs += 1;
                self.kernel_step(series, &cm, config)?;
                cm = self.candidate_matrix(series)?;
                self.solve_output(&cm, config)?;
                let res = relative_residual(&cm, &self.coefficients());
                if !res.is_finite() || res > 10.0 * initial.max(f64::MIN_POSITIVE) {
                    return Err(Error::Divergence { residual: res, initial, best: Box::new(best.0) });
                }
                if res < best.1 {
                    best = (self.clone(), res);
                }
            }
        }
        *self = best.0;
        self.trained = true;
        let cm = self.candidate_matrix(series)?;
        let coef = self.coefficients();
        let resid = residuals(&cm, &coef);
        let contributions = (0..self.terms.len())
            .map(|c| cm.data.column(c).iter().map(|v| (v * self.weights[c]).abs()).sum::<f64>() / cm.n_rows() as f64)
            .collect();
        Ok(FitReport {
            rows: cm.n_rows(),
            flagged_rows: cm.flagged_count(),
            initial_residual: initial,
            final_residual: best.1,
            mse: resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64,
            nonzero_terms: self.weights.iter().filter(|w| **w != 0.0).count(),
            epochs,
            contributions,
        })
    }

    /// Solves the weights by FISTA on centred, unit-RMS columns and a
    /// centred, unit-norm response, then maps back to raw units. The bias
    /// is not penalised. Constant columns get weight zero.
    fn solve_output(&mut self, cm: &CandidateMatrix, config: &TrainConfig) -> Result<()> {
        let (weights, bias) = solve_standardized(cm, config)?;
        self.weights = weights;
        self.bias = bias;
        Ok(())
    }

    /// One gradient step on all kernel taps of the squared residual with
    /// output weights held fixed.
    fn kernel_step(&mut self, series: &TimeSeries, cm: &CandidateMatrix, config: &TrainConfig) -> Result<()> {
        let grads = self.kernel_gradients(series, cm, config.fd_step);
        let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Ok(());
        }
        // Clip the global gradient norm to one.
        let scale = config.learning_rate / norm.max(1.0);
        for (t, term_grads) in grads.iter().enumerate() {
            for (s, g) in term_grads.iter().enumerate() {
                let kernel = &self.terms[t].kernels[s];
                let order = self.kernel_order(t, s);
                let stepped: Vec<f64> = kernel.weights().iter().zip(g).map(|(w, d)| w - scale * d).collect();
                let mut k = kernel.clone();
                k.set_weights_unchecked(&stepped);
                self.terms[t].kernels[s] = constrain_kernel(&k, order)?;
            }
        }
        Ok(())
    }

    fn kernel_order(&self, term: usize, slot: usize) -> usize {
        self.terms[term]
            .spec
            .factors()
            .iter()
            .filter_map(|f| match f {
                Factor::Ratio { order, .. } => Some(*order),
                Factor::Raw(_) => None,
            })
            .nth(slot)
            .expect("slot within ratio factors")
    }

    /// Central finite-difference gradient of the relative squared residual
    /// with respect to every kernel tap, indexed `[term][slot][tap]`.
    pub fn kernel_gradients(&self, series: &TimeSeries, cm: &CandidateMatrix, step: f64) -> Vec<Vec<Vec<f64>>> {
        let coef = self.coefficients();
        let base = residuals(cm, &coef);
        let scale = centred_sum_squares(&cm.lhs);
        let mut out = Vec::with_capacity(self.terms.len());
        for (t, term) in self.terms.iter().enumerate() {
            let w = self.weights[t];
            let column: Vec<f64> = cm.data.column(t).iter().copied().collect();
            let loss_with = |candidate: &Term| -> f64 {
                let col = self.column(candidate, series, &cm.indices);
                base.iter()
                    .zip(col.iter().zip(&column))
                    .map(|(r, (new, old))| {
                        let e = r + w * (new - old);
                        e * e
                    })
                    .sum::<f64>()
                    / scale
            };
            let mut term_grads = Vec::with_capacity(term.kernels.len());
            for (s, kernel) in term.kernels.iter().enumerate() {
                let mut g = vec![0.0; kernel.len()];
                if w != 0.0 {
                    for (p, gp) in g.iter_mut().enumerate() {
                        let mut probe = term.clone();
                        let mut taps = kernel.weights().to_vec();
                        taps[p] += step;
                        probe.kernels[s].set_weights_unchecked(&taps);
                        let up = loss_with(&probe);
                        taps[p] -= 2.0 * step;
                        probe.kernels[s].set_weights_unchecked(&taps);
                        let down = loss_with(&probe);
                        *gp = (up - down) / (2.0 * step);
                    }
                }
                term_grads.push(g);
            }
            out.push(term_grads);
        }
        out
    }

    /// Non-zero terms with their coefficients.
    pub fn term_descriptions(&self) -> Vec<(TermSpec, f64)> {
        self.terms
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|(t, w)| (t.spec.clone(), *w))
            .collect()
    }

    /// Value of every term at `index` (stride 1), without guard flags.
    pub fn term_values(&self, series: &TimeSeries, index: usize) -> Result<Vec<f64>> {
        self.check_index(series, index, 1)?;
        let mut row = Vec::new();
        self.row_into(series, index, 1, &mut row);
        row.pop();
        Ok(row)
    }
}

fn random_factor(rng: &mut ChaCha8Rng, k: usize, max_order: usize) -> Factor {
    let order = rng.random_range(1..=max_order);
    let kinds = if k > 0 { 4 } else { 2 };
    match rng.random_range(0..kinds) {
        0 => Factor::Ratio { num: Channel::Target, den: Denominator::Time, order },
        1 => Factor::Raw(Channel::Target),
        2 => Factor::Ratio { num: Channel::Target, den: Denominator::Covariate(rng.random_range(0..k)), order },
        _ => Factor::Raw(Channel::Covariate(rng.random_range(0..k))),
    }
}

/// LHS derivative at row `i`: forward difference (order 1) or three-point
/// second difference (order 2).
pub(crate) fn lhs_at(series: &TimeSeries, i: usize, order: usize) -> f64 {
    let (t, y) = (series.times(), series.target());
    match order {
        1 => (y[i + 1] - y[i]) / (t[i + 1] - t[i]),
        _ => second_diff_at(y, t, i),
    }
}

fn residuals(cm: &CandidateMatrix, coef: &[f64]) -> Vec<f64> {
    (0..cm.n_rows())
        .map(|r| cm.data.row(r).iter().zip(coef).map(|(x, w)| x * w).sum::<f64>() - cm.lhs[r])
        .collect()
}

fn centred_sum_squares(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    if ss > 0.0 {
        ss
    } else {
        1.0
    }
}

/// Residual sum of squares over the centred LHS sum of squares.
pub fn relative_residual(cm: &CandidateMatrix, coef: &[f64]) -> f64 {
    residuals(cm, coef).iter().map(|r| r * r).sum::<f64>() / centred_sum_squares(&cm.lhs)
}

/// Standardised lasso fit returning raw-unit weights and bias.
pub(crate) fn solve_standardized(cm: &CandidateMatrix, config: &TrainConfig) -> Result<(Vec<f64>, f64)> {
    let rows = cm.n_rows();
    let n_terms = cm.n_cols() - 1;
    let root_n = (rows as f64).sqrt();
    let b_mean = cm.lhs.iter().sum::<f64>() / rows as f64;
    let b_norm = cm.lhs.iter().map(|b| (b - b_mean).powi(2)).sum::<f64>().sqrt();
    let mut means = vec![0.0; n_terms];
    let mut sds = vec![0.0; n_terms];
    for c in 0..n_terms {
        let col = cm.data.column(c);
        let mean = col.sum() / rows as f64;
        means[c] = mean;
        sds[c] = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
    }
    let active: Vec<usize> = (0..n_terms).filter(|&c| sds[c] > 1e-12 * (1.0 + means[c].abs())).collect();
    let mut weights = vec![0.0; n_terms];
    if b_norm > 0.0 && !active.is_empty() {
        let z = DMatrix::from_fn(rows, active.len(), |r, a| {
            let c = active[a];
            (cm.data[(r, c)] - means[c]) / (sds[c] * root_n)
        });
        let resp = DVector::from_iterator(rows, cm.lhs.iter().map(|b| (b - b_mean) / b_norm));
        let problem = LassoProblem::new(z, resp, config.lambda)?.with_limits(config.fista_iters, config.fista_tol);
        let sol = fista(&problem)?;
        for (a, &c) in active.iter().enumerate() {
            weights[c] = sol.weights[a] * b_norm / (sds[c] * root_n);
        }
    }
    let bias = b_mean - weights.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
    if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("non-finite regression weights".into()));
    }
    Ok((weights, bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: &str) -> TermSpec {
        s.parse().unwrap()
    }

    fn uniform(m: usize, dt: f64, y: impl Fn(f64) -> f64, xs: &[&dyn Fn(f64) -> f64]) -> TimeSeries {
        let t: Vec<f64> = (0..m).map(|i| i as f64 * dt).collect();
        TimeSeries::from_columns(
            t.clone(),
            t.iter().map(|v| y(*v)).collect(),
            xs.iter().map(|f| t.iter().map(|v| f(*v)).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn term_grammar_round_trips() {
        for s in ["D2(y,x1)", "D1(y,x2)*x1*t", "y*y", "t", "D1(x1,t)*D1(y,x1)"] {
            let parsed = spec(s);
            assert_eq!(spec(&parsed.to_string()), parsed);
        }
        assert_eq!(spec("x1*y"), spec("y*x1"));
        assert!("D1(y,y)".parse::<TermSpec>().is_err());
        assert!("D1(x1,x1)".parse::<TermSpec>().is_err());
        assert!("z".parse::<TermSpec>().is_err());
        assert!("t*t".parse::<TermSpec>().is_err());
        assert!("x0".parse::<TermSpec>().is_err());
        assert_eq!(parse_terms("D2(y,x1); D2(y,x2)").unwrap().len(), 2);
    }

    #[test]
    fn candidate_matrix_shape() {
        let s = uniform(20, 0.1, |t| t.sin(), &[&|t: f64| t.cos() + 2.0]);
        let b = PBlock::with_terms(vec![spec("D1(y,x1)"), spec("y")], 1, 5, 1).unwrap();
        let cm = b.candidate_matrix(&s).unwrap();
        assert_eq!(cm.n_rows(), 15);
        assert_eq!(cm.indices.first(), Some(&4));
        assert_eq!(cm.indices.last(), Some(&18));
        assert_eq!(cm.n_cols(), 3);
        assert!(cm.data.column(2).iter().all(|v| *v == 1.0));
        let short = uniform(5, 0.1, |t| t, &[&|t: f64| t]);
        assert!(matches!(b.candidate_matrix(&short), Err(Error::TooShort(_))));
    }

    #[test]
    fn constant_series_columns() {
        let s = uniform(20, 0.1, |_| 3.0, &[&|_| 2.0]);
        let b = PBlock::with_terms(vec![spec("D1(y,x1)"), spec("y")], 1, 5, 1).unwrap();
        let cm = b.candidate_matrix(&s).unwrap();
        assert!(cm.data.column(0).iter().all(|v| *v == 0.0));
        assert_eq!(cm.flagged_count(), cm.n_rows());
        assert!(cm.data.column(1).iter().all(|v| *v == 3.0));
    }

    #[test]
    fn time_gate_multiplies_by_time() {
        let s = uniform(30, 0.1, |t| t * t, &[&|t: f64| t.sin() + 2.0]);
        let b = PBlock::with_terms(vec![spec("D1(y,x1)*x1"), spec("D1(y,x1)*x1*t")], 1, 5, 1).unwrap();
        let cm = b.candidate_matrix(&s).unwrap();
        for (r, &i) in cm.indices.iter().enumerate() {
            assert_eq!(cm.data[(r, 1)], cm.data[(r, 0)] * s.times()[i]);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let s = uniform(20, 0.1, |t| t, &[&|t: f64| t.exp()]);
        let mut b = PBlock::with_terms(vec![spec("D1(y,x1)")], 1, 5, 1).unwrap();
        b.set_output(vec![0.0], 0.75).unwrap();
        assert_eq!(b.evaluate(&s, 10).unwrap(), 0.75);
        assert!(matches!(b.evaluate(&s, 3), Err(Error::Index(_))));
        assert!(matches!(b.evaluate(&s, 20), Err(Error::Index(_))));
    }

    #[test]
    fn ratio_matches_oracle_derivative() {
        // y = x², x uniform in time: (K⊛y)/(K⊛x) = dy/dx at the window centre.
        let dx = 0.01;
        let s = uniform(40, dx, |t| (1.0 + t).powi(2), &[&|t: f64| 1.0 + t]);
        let mut b = PBlock::with_terms(vec![spec("D1(y,x1)")], 1, 3, 1).unwrap();
        b.set_output(vec![1.0], 0.0).unwrap();
        let x = s.covariate(0);
        let oracle = crate::diffop::fd_oracle(s.target(), x, 1).unwrap();
        for i in 2..40 {
            let f = b.evaluate(&s, i).unwrap();
            assert!((f - oracle[i - 2]).abs() < 1e-9);
            assert!((f - 2.0 * x[i - 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_kernels_reduce_to_plain_values() {
        let s = uniform(30, 0.1, |t| 1.0 + t.sin(), &[&|t: f64| 2.0 + t.cos(), &|t: f64| 1.5 + t]);
        let specs = vec![spec("D1(y,x1)*x2"), spec("y*y"), spec("D2(y,x2)*D1(x1,x2)")];
        let mut b = PBlock::with_terms(specs, 2, 5, 1).unwrap();
        let delta = ConvKernel::delta(5).unwrap();
        b.set_kernel(0, 0, delta.clone()).unwrap();
        b.set_kernel(2, 0, delta.clone()).unwrap();
        b.set_kernel(2, 1, delta).unwrap();
        b.set_output(vec![0.3, -1.2, 0.7], 0.1).unwrap();
        let (y, x1, x2) = (s.target(), s.covariate(0), s.covariate(1));
        for i in 4..30 {
            let c = i - 2;
            let direct = 0.3 * (y[c] / x1[c]) * x2[i] - 1.2 * y[i] * y[i] + 0.7 * (x1[c] / x2[c]) * (y[c] / x2[c]) + 0.1;
            assert!((b.evaluate(&s, i).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_matches_candidate_rows() {
        let s = uniform(50, 0.05, |t| (2.0 * t).sin(), &[&|t: f64| 1.5 + t.cos()]);
        let mut b = PBlock::random(&StructureConfig { n_channels: 5, seed: 4, ..Default::default() }, 1).unwrap();
        let w: Vec<f64> = (0..b.terms().len()).map(|c| 0.3 * c as f64 - 0.4).collect();
        b.set_output(w, -0.2).unwrap();
        let cm = b.candidate_matrix(&s).unwrap();
        let coef = b.coefficients();
        for (r, &i) in cm.indices.iter().enumerate() {
            let row: Vec<f64> = cm.data.row(r).iter().copied().collect();
            assert!((b.evaluate(&s, i).unwrap() - dot(&row, &coef)).abs() <= 1e-12);
        }
    }

    #[test]
    fn channel_permutation_is_invisible() {
        let s = uniform(40, 0.05, |t| t.cos(), &[&|t: f64| 2.0 + t.sin()]);
        let specs = vec![spec("D1(y,x1)"), spec("y*x1"), spec("D2(y,t)*t")];
        let mut a = PBlock::with_terms(specs.clone(), 1, 5, 1).unwrap();
        a.set_output(vec![0.5, -0.25, 2.0], 0.3).unwrap();
        let mut b = PBlock::with_terms(vec![specs[2].clone(), specs[0].clone(), specs[1].clone()], 1, 5, 1).unwrap();
        b.set_output(vec![2.0, 0.5, -0.25], 0.3).unwrap();
        for i in 4..40 {
            let (fa, fb) = (a.evaluate(&s, i).unwrap(), b.evaluate(&s, i).unwrap());
            assert!((fa - fb).abs() < 1e-12);
        }
    }

    #[test]
    fn learns_chain_rule_on_linear_relation() {
        let s = uniform(300, 0.01, |t| 2.0 * (0.5 * t).sin(), &[&|t: f64| (0.5 * t).sin()]);
        let mut b = PBlock::with_terms(vec![spec("D1(y,x1)*D1(x1,t)")], 1, 5, 1).unwrap();
        let report = b.train(&s, &TrainConfig { lambda: 1e-6, ..Default::default() }).unwrap();
        assert!(report.final_residual < 1e-3, "{report:?}");
        assert!((b.weights()[0] - 1.0).abs() < 0.05, "{:?}", b.weights());
    }

    #[test]
    fn huge_lambda_zeroes_weights() {
        let s = uniform(100, 0.05, |t| t.sin(), &[&|t: f64| t.cos() + 2.0]);
        let mut b = PBlock::with_terms(vec![spec("D1(y,x1)"), spec("x1")], 1, 5, 1).unwrap();
        b.train(&s, &TrainConfig { lambda: 1e6, ..Default::default() }).unwrap();
        assert!(b.weights().iter().all(|w| *w == 0.0));
        assert!(b.term_descriptions().is_empty());
        let lhs = crate::series::finite_diff_time(&s, 1).unwrap();
        let mean = lhs[4..].iter().sum::<f64>() / lhs[4..].len() as f64;
        assert!((b.bias() - mean).abs() < 1e-12);
    }

    #[test]
    fn recovers_raw_linear_dynamics() {
        // dy/dt = 1.5 x1 - 0.5 x2 sampled exactly at left endpoints.
        let dt = 0.01;
        let m = 400;
        let t: Vec<f64> = (0..m).map(|i| i as f64 * dt).collect();
        let x1: Vec<f64> = t.iter().map(|v| (3.0 * v).sin()).collect();
        let x2: Vec<f64> = t.iter().map(|v| (1.7 * v).cos()).collect();
        let mut y = vec![0.0];
        for i in 0..m - 1 {
            y.push(y[i] + dt * (1.5 * x1[i] - 0.5 * x2[i]));
        }
        let s = TimeSeries::from_columns(t, y, vec![x1, x2]).unwrap();
        let mut b = PBlock::with_terms(vec![spec("x1"), spec("x2"), spec("y")], 2, 3, 1).unwrap();
        let report = b.train(&s, &TrainConfig { lambda: 1e-8, ..Default::default() }).unwrap();
        assert!((b.weights()[0] - 1.5).abs() < 1e-3 && (b.weights()[1] + 0.5).abs() < 1e-3, "{:?} {report:?}", b.weights());
    }

    #[test]
    fn random_structure_is_seeded() {
        let cfg = StructureConfig { n_channels: 6, n_layers: 3, seed: 11, ..Default::default() };
        let a = PBlock::random(&cfg, 2).unwrap();
        assert_eq!(a, PBlock::random(&cfg, 2).unwrap());
        assert_eq!(a.terms().len(), 6);
        let other = PBlock::random(&StructureConfig { seed: 12, ..cfg }, 2).unwrap();
        assert_ne!(a, other);
        for t in a.terms() {
            assert_eq!(t.kernels.len(), t.spec.ratio_count());
            assert!(t.kernels.iter().all(ConvKernel::satisfies_constraint));
        }
    }

    #[test]
    fn descriptions_keep_gate() {
        let mut b = PBlock::with_terms(vec![spec("D1(y,x1)*t"), spec("x1")], 1, 5, 1).unwrap();
        b.set_output(vec![0.062, 0.0], 0.0).unwrap();
        let d = b.term_descriptions();
        assert_eq!(d.len(), 1);
        assert!(d[0].0.time());
        assert_eq!(d[0].0.to_string(), "D1(y,x1)*t");
    }

    #[test]
    fn training_keeps_kernel_constraints_and_serializes() {
        let s = uniform(200, 0.02, |t| (1.3 * t).sin() + 0.2 * t, &[&|t: f64| 2.0 + (0.7 * t).cos()]);
        let mut b = PBlock::with_terms(vec![spec("D1(y,x1)*D1(x1,t)"), spec("D2(y,t)")], 1, 5, 1).unwrap();
        b.train(&s, &TrainConfig { epochs: 5, learning_rate: 0.05, ..Default::default() }).unwrap();
        for t in b.terms() {
            assert!(t.kernels.iter().all(ConvKernel::satisfies_constraint));
        }
        let json = serde_json::to_string(&b).unwrap();
        let back: PBlock = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
    }
}
